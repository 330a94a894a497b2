//! DINF feature caches: the extracted 3-channel tensors for one utterance.
//!
//! Layout: a 16-byte header — magic `DINF`, format version u32, filter count
//! F u32, frame count T u32 — followed by one `3 * F * T` block of
//! little-endian f32 per segment, channel-major, segments concatenated. The
//! segment count is implied by the payload length.

use std::path::Path;

use ndarray::Array3;

use crate::dsp::SpectrogramTensor;
use crate::error::{DinError, Result};
use crate::io::{atomic_write, Cursor, PutLe};

pub const FEATURE_MAGIC: &[u8; 4] = b"DINF";
pub const FEATURE_VERSION: u32 = 1;

/// Serialize all segments of one utterance. Fails on an empty list (an
/// utterance always yields at least one segment) or mixed shapes.
pub fn write_feature_cache(path: &Path, tensors: &[SpectrogramTensor]) -> Result<()> {
    let first = tensors
        .first()
        .ok_or_else(|| DinError::data("cannot write an empty feature cache"))?;
    let (c, f, t) = first.data.dim();
    if c != 3 {
        return Err(DinError::shape(format!("feature tensor has {c} channels, want 3")));
    }
    for tensor in tensors {
        if tensor.data.dim() != (c, f, t) {
            return Err(DinError::shape(format!(
                "segment {} shape {:?} differs from first segment {:?}",
                tensor.segment_index,
                tensor.data.dim(),
                (c, f, t)
            )));
        }
    }
    let (f32_of, t32) = (
        u32::try_from(f).map_err(|_| DinError::data("filter count exceeds u32"))?,
        u32::try_from(t).map_err(|_| DinError::data("frame count exceeds u32"))?,
    );

    let mut buf = Vec::with_capacity(16 + tensors.len() * 3 * f * t * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.put_u32(FEATURE_VERSION);
    buf.put_u32(f32_of);
    buf.put_u32(t32);
    for tensor in tensors {
        // Logical (channel, filter, frame) order regardless of memory layout.
        for &v in tensor.data.iter() {
            buf.put_f32(v);
        }
    }
    atomic_write(path, &buf)
}

/// Read back the per-segment tensors. Shapes are `(3, F, T)`; the utterance
/// id is carried by the file name, not the payload.
pub fn read_feature_cache(path: &Path) -> Result<Vec<Array3<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| DinError::io(path, e))?;
    let mut c = Cursor::new(&bytes, path);
    c.magic(FEATURE_MAGIC, "DINF")?;
    let version = c.u32_le("version")?;
    if version != FEATURE_VERSION {
        return Err(DinError::format(
            path,
            format!("unsupported DINF version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let f = c.u32_le("filter count")? as usize;
    let t = c.u32_le("frame count")? as usize;
    if f == 0 || t == 0 {
        return Err(DinError::format(path, format!("degenerate tensor shape 3x{f}x{t}")));
    }
    let seg_floats = 3 * f * t;
    let payload = c.remaining();
    if payload % (seg_floats * 4) != 0 {
        return Err(DinError::format(
            path,
            format!(
                "payload of {payload} bytes is not a whole number of 3x{f}x{t} segments \
                 ({} bytes each)",
                seg_floats * 4
            ),
        ));
    }
    let n_segments = payload / (seg_floats * 4);
    if n_segments == 0 {
        return Err(DinError::format(path, "feature cache contains no segments"));
    }

    let mut out = Vec::with_capacity(n_segments);
    for seg in 0..n_segments {
        let raw = c.take(seg_floats * 4, &format!("segment {seg}"))?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DinError::format(path, format!("non-finite value in segment {seg}")));
        }
        let data = Array3::from_shape_vec((3, f, t), vals).expect("length checked above");
        out.push(data);
    }
    Ok(out)
}
