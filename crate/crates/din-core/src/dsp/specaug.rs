//! SpecAug-style frequency and time masking.

use rand::Rng;

use crate::dsp::{SpecAugParams, SpectrogramTensor};
use crate::error::{DinError, Result};

/// Apply SpecAug masks to a feature tensor.
///
/// Frequency masks are drawn first, then time masks. Each mask draws a
/// width uniform in [0, max] then a start uniform in [0, axis_len - width];
/// the band is filled with that channel's mean over the *original* tensor,
/// with identical band positions across all 3 channels. With `enabled`
/// false the input is returned unchanged.
pub fn spec_augment<R: Rng>(
    t: &SpectrogramTensor,
    p: &SpecAugParams,
    rng: &mut R,
) -> Result<SpectrogramTensor> {
    let (channels, n_freq, n_time) = t.data.dim();
    if p.max_freq_mask > n_freq {
        return Err(DinError::config(format!(
            "max_freq_mask {} exceeds {} frequency bins",
            p.max_freq_mask, n_freq
        )));
    }
    if p.max_time_mask > n_time {
        return Err(DinError::config(format!(
            "max_time_mask {} exceeds {} frames",
            p.max_time_mask, n_time
        )));
    }
    if !p.enabled {
        return Ok(t.clone());
    }

    let channel_means: Vec<f32> = (0..channels)
        .map(|c| {
            let ch = t.data.index_axis(ndarray::Axis(0), c);
            (ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64) as f32
        })
        .collect();

    let mut out = t.clone();
    for _ in 0..p.n_freq_masks {
        let width = rng.random_range(0..=p.max_freq_mask);
        let start = rng.random_range(0..=n_freq - width);
        for c in 0..channels {
            out.data
                .slice_mut(ndarray::s![c, start..start + width, ..])
                .fill(channel_means[c]);
        }
    }
    for _ in 0..p.n_time_masks {
        let width = rng.random_range(0..=p.max_time_mask);
        let start = rng.random_range(0..=n_time - width);
        for c in 0..channels {
            out.data
                .slice_mut(ndarray::s![c, .., start..start + width])
                .fill(channel_means[c]);
        }
    }
    Ok(out)
}
