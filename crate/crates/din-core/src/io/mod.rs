//! On-disk formats: WAV audio, DINF feature caches, DINC checkpoints.
//!
//! All binary payloads are little-endian. Every write goes through a
//! temp-file-then-rename so readers never observe a half-written file.

pub mod checkpoint;
pub mod feature_cache;
pub mod wav;

use std::path::{Path, PathBuf};

use crate::error::{DinError, Result};

/// Write `bytes` to a sibling temp file, then atomically rename onto `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| DinError::data(format!("cannot write to {}: no file name", path.display())))?
        .to_owned();
    let mut tmp_name = file_name;
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp_path: PathBuf = match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(&tmp_name),
        _ => PathBuf::from(&tmp_name),
    };
    std::fs::write(&tmp_path, bytes).map_err(|e| DinError::io(&tmp_path, e))?;
    std::fs::rename(&tmp_path, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp_path);
        DinError::io(path, e)
    })
}

/// Sequential little-endian reader over a fully loaded file.
///
/// Every accessor reports the file path and byte offset on failure so
/// truncated or corrupt files produce actionable errors.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Cursor { buf, pos: 0, path }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(DinError::format(
                self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.remaining()
                ),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    /// Remaining bytes, consuming them.
    pub fn rest(&mut self) -> &'a [u8] {
        let slice = &self.buf[self.pos..];
        self.pos = self.buf.len();
        slice
    }

    pub fn magic(&mut self, expected: &[u8; 4], format_name: &str) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(DinError::format(
                self.path,
                format!("not a {format_name} file: bad magic {got:?}"),
            ));
        }
        Ok(())
    }

    pub fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn f64_le(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8-byte slice")))
    }

    /// Read `n` consecutive f32 values into an f64 vector.
    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// `Vec<u8>` extension helpers for building file images.
pub(crate) trait PutLe {
    fn put_u16(&mut self, v: u16);
    fn put_u32(&mut self, v: u32);
    fn put_f32(&mut self, v: f32);
    fn put_f64(&mut self, v: f64);
}

impl PutLe for Vec<u8> {
    fn put_u16(&mut self, v: u16) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_u32(&mut self, v: u32) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_f32(&mut self, v: f32) {
        self.extend_from_slice(&v.to_le_bytes());
    }

    fn put_f64(&mut self, v: f64) {
        self.extend_from_slice(&v.to_le_bytes());
    }
}
