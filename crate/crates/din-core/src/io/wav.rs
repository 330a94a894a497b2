//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono audio.
//!
//! The reader walks the chunk list, requires a PCM `fmt ` chunk describing
//! mono 16-bit samples, and tolerates (skips) any other chunk. The writer
//! emits the canonical 44-byte header. Both directions use the symmetric
//! 1/32768 scale; writing rounds and saturates to the i16 range, so a round
//! trip is exact to half a quantization step away from full scale.

use std::path::Path;

use crate::dsp::{AudioClip, EXPECTED_SAMPLE_RATE};
use crate::error::{DinError, Result};
use crate::io::{atomic_write, Cursor, PutLe};

/// Read a 16-bit PCM mono WAV at any sample rate. The clip's `utt_id` is the
/// file stem.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| DinError::io(path, e))?;
    let mut c = Cursor::new(&bytes, path);
    c.magic(b"RIFF", "RIFF/WAVE")?;
    let _riff_size = c.u32_le("RIFF size")?;
    let wave = c.take(4, "WAVE tag")?;
    if wave != b"WAVE" {
        return Err(DinError::format(path, format!("not a WAVE file: form type {wave:?}")));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while c.remaining() > 0 {
        // A final odd padding byte is legal after the last chunk.
        if c.remaining() < 8 {
            break;
        }
        let id: [u8; 4] = c.take(4, "chunk id")?.try_into().expect("4-byte slice");
        let size = c.u32_le("chunk size")? as usize;
        let body = c.take(size, &format!("chunk {:?} body", String::from_utf8_lossy(&id)))?;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(DinError::format(path, format!("fmt chunk too short: {size} bytes")));
                }
                let f = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                fmt = Some((f(0), f(2), rate, f(14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        if size % 2 == 1 && c.remaining() > 0 {
            c.take(1, "chunk padding")?;
        }
    }

    let (format, channels, sample_rate_hz, bits) =
        fmt.ok_or_else(|| DinError::format(path, "missing fmt chunk"))?;
    if format != 1 {
        return Err(DinError::format(path, format!("unsupported WAV format {format}, want PCM (1)")));
    }
    if channels != 1 {
        return Err(DinError::format(path, format!("unsupported channel count {channels}, want mono")));
    }
    if bits != 16 {
        return Err(DinError::format(path, format!("unsupported bit depth {bits}, want 16")));
    }
    let data = data.ok_or_else(|| DinError::format(path, "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(DinError::format(path, format!("data chunk has odd length {}", data.len())));
    }

    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    let utt_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    AudioClip::new(samples, sample_rate_hz, utt_id)
}

/// [`read_wav`], then require the pipeline sample rate (16 kHz). Clips at any
/// other rate are rejected rather than resampled.
pub fn read_clip(path: &Path) -> Result<AudioClip> {
    let clip = read_wav(path)?;
    if clip.sample_rate_hz != EXPECTED_SAMPLE_RATE {
        return Err(DinError::data(format!(
            "{}: sample rate {} Hz, pipeline requires {} Hz",
            path.display(),
            clip.sample_rate_hz,
            EXPECTED_SAMPLE_RATE
        )));
    }
    Ok(clip)
}

/// Write 16-bit PCM mono. Samples are clamped to [-1, 1] and rounded.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate_hz: u32) -> Result<()> {
    if sample_rate_hz == 0 {
        return Err(DinError::data("sample_rate_hz must be positive"));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(DinError::data("non-finite sample in audio to write"));
    }
    let data_len = samples.len().checked_mul(2).and_then(|n| u32::try_from(n).ok()).ok_or_else(
        || DinError::data(format!("audio too long for WAV: {} samples", samples.len())),
    )?;

    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.put_u32(36 + data_len);
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.put_u32(16);
    buf.put_u16(1); // PCM
    buf.put_u16(1); // mono
    buf.put_u32(sample_rate_hz);
    buf.put_u32(sample_rate_hz * 2); // byte rate
    buf.put_u16(2); // block align
    buf.put_u16(16); // bits per sample
    buf.extend_from_slice(b"data");
    buf.put_u32(data_len);
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    atomic_write(path, &buf)
}
