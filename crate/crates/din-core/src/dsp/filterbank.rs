//! Linearly spaced triangular filterbank (the LF of STFT-LF).

use ndarray::{Array1, Array2, ArrayView2};

use crate::dsp::FrontendConfig;
use crate::error::{DinError, Result};
use crate::linalg;

/// Triangular filterbank over linearly spaced band edges in [0, sr/2].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    /// `n_filters x (window_size/2 + 1)` nonnegative weights.
    pub weights: Array2<f64>,
    /// `n_filters + 2` strictly increasing edge frequencies in Hz.
    pub band_edges: Array1<f64>,
}

/// Build the filterbank for a given frontend config and sample rate.
///
/// Band edges are `n_filters + 2` points linearly spaced over [0, sr/2].
/// Filter `i` rises linearly from `edges[i]` to peak weight 1 at
/// `edges[i+1]`, then falls to `edges[i+2]`, evaluated at FFT bin center
/// frequencies `k * sr / window_size`.
pub fn build_linear_filterbank(cfg: &FrontendConfig, sample_rate_hz: u32) -> Result<FilterBank> {
    cfg.validate()?;
    let n_bins = cfg.window_size / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let n_edges = cfg.n_filters + 2;
    let band_edges =
        Array1::from_iter((0..n_edges).map(|i| nyquist * i as f64 / (n_edges - 1) as f64));

    let bin_hz = sample_rate_hz as f64 / cfg.window_size as f64;
    let mut weights = Array2::<f64>::zeros((cfg.n_filters, n_bins));
    for i in 0..cfg.n_filters {
        let (lo, mid, hi) = (band_edges[i], band_edges[i + 1], band_edges[i + 2]);
        let mut any_positive = false;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if (f - mid).abs() < 1e-12 {
                1.0
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                any_positive = true;
            }
            weights[[i, k]] = w;
        }
        if !any_positive {
            return Err(DinError::config(format!(
                "filter {i} spanning {lo:.1}-{hi:.1} Hz covers no FFT bin; \
                 n_filters = {} exceeds the FFT resolution",
                cfg.n_filters
            )));
        }
    }
    Ok(FilterBank { weights, band_edges })
}

impl FilterBank {
    pub fn n_filters(&self) -> usize {
        self.weights.nrows()
    }

    /// `ln(weights . power + log_floor)`, elementwise.
    pub fn apply_log(&self, power: ArrayView2<f64>, log_floor: f64) -> Result<Array2<f64>> {
        if power.nrows() != self.weights.ncols() {
            return Err(DinError::shape(format!(
                "power has {} bins, filterbank expects {}",
                power.nrows(),
                self.weights.ncols()
            )));
        }
        if power.iter().any(|&v| v < 0.0) {
            return Err(DinError::data("negative power spectrogram entry"));
        }
        let mut out = linalg::matmul(&self.weights.view(), &power);
        out.mapv_inplace(|v| (v + log_floor).ln());
        Ok(out)
    }
}

/// Convenience wrapper mirroring the free-function style of the pipeline.
pub fn apply_filterbank_log(
    power: &Array2<f64>,
    fb: &FilterBank,
    log_floor: f64,
) -> Result<Array2<f64>> {
    fb.apply_log(power.view(), log_floor)
}
