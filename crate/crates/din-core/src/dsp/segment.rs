//! Fixed-length segmentation with tiling of short remainders.

use crate::dsp::{AudioClip, FrontendConfig};
use crate::error::{DinError, Result};

/// Split a clip into non-overlapping `segment_seconds` windows.
///
/// A trailing remainder shorter than one window is tiled (repeated
/// end-to-end, truncated) up to the full window length when it covers at
/// least 25% of a window; otherwise it is dropped. A clip shorter than one
/// window — even shorter than 25% — is always tiled so that no utterance
/// yields zero segments.
pub fn segment_audio(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    let seg_len = cfg.segment_len(clip.sample_rate_hz);
    if seg_len == 0 {
        return Err(DinError::config("segment length rounds to zero samples"));
    }
    if clip.samples.is_empty() {
        return Err(DinError::data(format!("utterance {:?} is empty", clip.utt_id)));
    }
    let n = clip.samples.len();
    let full = n / seg_len;
    let rem = n - full * seg_len;

    let mut segments = Vec::with_capacity(full + 1);
    for i in 0..full {
        segments.push(clip.samples[i * seg_len..(i + 1) * seg_len].to_vec());
    }
    let keep_remainder = rem > 0 && (full == 0 || rem * 4 >= seg_len);
    if keep_remainder {
        let tail = &clip.samples[full * seg_len..];
        segments.push(tile(tail, seg_len));
    }
    Ok(segments)
}

/// Repeat `src` end-to-end until `len` samples, truncating the last copy.
fn tile(src: &[f64], len: usize) -> Vec<f64> {
    debug_assert!(!src.is_empty());
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let take = (len - out.len()).min(src.len());
        out.extend_from_slice(&src[..take]);
    }
    out
}
