//! Spectrogram frontend: segmentation, STFT, linear filterbank, deltas,
//! SpecAug, and the composed feature extractor.
//!
//! Raw 16 kHz mono audio goes in; 3-channel `n_filters x target_frames`
//! log-filterbank tensors (base, delta, delta-delta) come out, one per
//! 4-second segment.

mod delta;
mod filterbank;
mod segment;
mod specaug;
mod stft;

pub use delta::compute_delta;
pub use filterbank::{apply_filterbank_log, build_linear_filterbank, FilterBank};
pub use segment::segment_audio;
pub use specaug::spec_augment;
pub use stft::stft_power;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::rng;

/// Sample rate the pipeline is calibrated for. WAVs at any other rate are
/// rejected at load time rather than resampled.
pub const EXPECTED_SAMPLE_RATE: u32 = 16_000;

/// A raw mono utterance.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub utt_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, utt_id: impl Into<String>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(DinError::data("sample_rate_hz must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DinError::data("non-finite sample in audio"));
        }
        Ok(AudioClip { samples, sample_rate_hz, utt_id: utt_id.into() })
    }
}

/// SpecAug masking policy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugParams {
    pub enabled: bool,
    pub n_freq_masks: usize,
    pub max_freq_mask: usize,
    pub n_time_masks: usize,
    pub max_time_mask: usize,
}

impl Default for SpecAugParams {
    fn default() -> Self {
        SpecAugParams {
            enabled: true,
            n_freq_masks: 2,
            max_freq_mask: 16,
            n_time_masks: 2,
            max_time_mask: 20,
        }
    }
}

/// Frontend configuration. Defaults produce 3x128x128 tensors from
/// 4-second segments at 16 kHz.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub segment_seconds: f64,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_filters: usize,
    pub target_frames: usize,
    pub log_floor: f64,
    pub delta_width: usize,
    pub specaug: SpecAugParams,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            segment_seconds: 4.0,
            window_size: 1024,
            hop_size: 512,
            n_filters: 128,
            target_frames: 128,
            log_floor: 1e-10,
            delta_width: 9,
            specaug: SpecAugParams::default(),
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_seconds <= 0.0 {
            return Err(DinError::config("segment_seconds must be > 0"));
        }
        if !self.window_size.is_power_of_two() {
            return Err(DinError::config(format!(
                "window_size must be a power of two, got {}",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(DinError::config(format!(
                "hop_size must be in [1, window_size], got {}",
                self.hop_size
            )));
        }
        if self.n_filters < 2 {
            return Err(DinError::config("n_filters must be >= 2"));
        }
        if self.target_frames < 1 {
            return Err(DinError::config("target_frames must be >= 1"));
        }
        if self.log_floor <= 0.0 {
            return Err(DinError::config("log_floor must be positive"));
        }
        if self.delta_width < 3 || self.delta_width % 2 == 0 {
            return Err(DinError::config(format!(
                "delta_width must be odd and >= 3, got {}",
                self.delta_width
            )));
        }
        Ok(())
    }

    pub fn segment_len(&self, sample_rate_hz: u32) -> usize {
        (self.segment_seconds * sample_rate_hz as f64).round() as usize
    }
}

/// 3-channel feature tensor for one segment: channel 0 log filterbank
/// energy, 1 first delta, 2 second delta.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramTensor {
    pub data: Array3<f32>,
    pub source_utt: String,
    pub segment_index: usize,
}

impl SpectrogramTensor {
    pub fn n_filters(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Full frontend for one clip: segment, STFT, filterbank+log, deltas, stack,
/// then SpecAug iff `training`. SpecAug streams derive from
/// (seed, utt_id, segment_index) so parallel extraction is order-independent.
pub fn extract_features(
    clip: &AudioClip,
    cfg: &FrontendConfig,
    training: bool,
    seed: u64,
) -> Result<Vec<SpectrogramTensor>> {
    cfg.validate()?;
    let fb = build_linear_filterbank(cfg, clip.sample_rate_hz)?;
    let windows = segment_audio(clip, cfg)?;
    let mut out = Vec::with_capacity(windows.len());
    for (segment_index, window) in windows.iter().enumerate() {
        let power = stft_power(window, cfg)?;
        let logfb = fb.apply_log(power.view(), cfg.log_floor)?;
        let d1 = compute_delta(&logfb, cfg.delta_width)?;
        let d2 = compute_delta(&d1, cfg.delta_width)?;
        let tensor = stack_channels(&logfb, &d1, &d2, &clip.utt_id, segment_index);
        let tensor = if training && cfg.specaug.enabled {
            let label = format!("specaug/{}", clip.utt_id);
            let mut rng = rng::stream(seed, &label, segment_index as u64);
            spec_augment(&tensor, &cfg.specaug, &mut rng)?
        } else {
            tensor
        };
        out.push(tensor);
    }
    Ok(out)
}

fn stack_channels(
    base: &Array2<f64>,
    d1: &Array2<f64>,
    d2: &Array2<f64>,
    utt_id: &str,
    segment_index: usize,
) -> SpectrogramTensor {
    let (f, t) = base.dim();
    let mut data = Array3::<f32>::zeros((3, f, t));
    for ((i, j), v) in base.indexed_iter() {
        data[[0, i, j]] = *v as f32;
    }
    for ((i, j), v) in d1.indexed_iter() {
        data[[1, i, j]] = *v as f32;
    }
    for ((i, j), v) in d2.indexed_iter() {
        data[[2, i, j]] = *v as f32;
    }
    SpectrogramTensor { data, source_utt: utt_id.to_string(), segment_index }
}
