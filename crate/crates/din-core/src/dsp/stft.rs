//! Short-time Fourier power spectrogram with centered frames.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::FrontendConfig;
use crate::error::{DinError, Result};

/// Power spectrogram of one fixed-length window.
///
/// Frames are Hann-windowed, centered by reflection padding of
/// `window_size/2` on each side, and spaced `hop_size` apart. The frame
/// axis is then fitted to exactly `cfg.target_frames`: excess trailing
/// frames are trimmed, missing ones are filled by replicating the final
/// frame. Output shape is `(window_size/2 + 1) x target_frames`, entry
/// `(k, t)` the squared DFT magnitude of bin `k` in frame `t`.
pub fn stft_power(window: &[f64], cfg: &FrontendConfig) -> Result<Array2<f64>> {
    let w = cfg.window_size;
    let hop = cfg.hop_size;
    let n = window.len();
    if n < w {
        return Err(DinError::data(format!(
            "window has {n} samples, need at least window_size = {w}"
        )));
    }
    let pad = w / 2;
    let padded_len = n + 2 * pad;
    let n_raw = (padded_len - w) / hop + 1;
    let n_bins = w / 2 + 1;

    let hann = hann_periodic(w);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(w);
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let emit = n_raw.min(cfg.target_frames);
    let mut power = Array2::<f64>::zeros((n_bins, cfg.target_frames));
    for t in 0..emit {
        let start = t as isize * hop as isize - pad as isize;
        for j in 0..w {
            let src = reflect_index(start + j as isize, n);
            buf[j] = Complex::new(window[src] * hann[j], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_bins {
            power[[k, t]] = buf[k].norm_sqr();
        }
    }
    // replicate the final computed frame into any remaining columns
    for t in emit..cfg.target_frames {
        let (src, mut dst) = power.multi_slice_mut((
            ndarray::s![.., emit - 1],
            ndarray::s![.., t],
        ));
        dst.assign(&src);
    }
    Ok(power)
}

/// Periodic Hann window: w[j] = 0.5 (1 - cos(2 pi j / N)).
fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos()))
        .collect()
}

/// Map an index into [0, n) by reflecting about the first and last samples
/// without repeating them (period 2n-2), matching reflect padding.
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::EXPECTED_SAMPLE_RATE;
    use rand::Rng;

    fn cfg() -> FrontendConfig {
        FrontendConfig::default()
    }

    #[test]
    fn reflect_index_matches_mirror_convention() {
        // pad-2 reflect of [a b c d] is [c b | a b c d | c b]
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(0, 4), 0);
        assert_eq!(reflect_index(3, 4), 3);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(5, 4), 1);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn output_shape_is_bins_by_target_frames() {
        let window = vec![0.1; 64_000];
        let p = stft_power(&window, &cfg()).unwrap();
        assert_eq!(p.dim(), (513, 128));
    }

    #[test]
    fn zero_window_gives_zero_power() {
        let p = stft_power(&vec![0.0; 64_000], &cfg()).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_window_is_rejected() {
        assert!(stft_power(&vec![0.0; 1023], &cfg()).is_err());
    }

    #[test]
    fn sine_at_bin_32_peaks_at_bin_32() {
        let sr = EXPECTED_SAMPLE_RATE as f64;
        let f = 32.0 * sr / 1024.0; // 500 Hz
        let window: Vec<f64> = (0..64_000)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin())
            .collect();
        let p = stft_power(&window, &cfg()).unwrap();
        // interior frames only: skip frames whose support touches the
        // reflection-padded ends (first and last frame of the raw 126)
        for t in 1..125 {
            let col = p.column(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 32, "frame {t}");
        }
    }

    #[test]
    fn frame_energy_satisfies_parseval() {
        let mut rng = crate::rng::stream(7, "stft-parseval", 0);
        let window: Vec<f64> = (0..64_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = stft_power(&window, &cfg()).unwrap();

        // frame t=4 starts at 4*512 - 512 = 1536 in signal coordinates:
        // fully interior, so reflect_index is the identity there
        let t = 4usize;
        let start = t * 512 - 512;
        let hann = hann_periodic(1024);
        let time_energy: f64 = (0..1024)
            .map(|j| {
                let x = window[start + j] * hann[j];
                x * x
            })
            .sum();
        let col = p.column(t);
        let mut spec_energy = col[0] + col[512];
        for k in 1..512 {
            spec_energy += 2.0 * col[k];
        }
        spec_energy /= 1024.0;
        let rel = (spec_energy - time_energy).abs() / time_energy;
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn missing_frames_replicate_the_last_one() {
        // 64000 samples -> 126 raw frames; columns 126 and 127 copy 125
        let sr = EXPECTED_SAMPLE_RATE as f64;
        let window: Vec<f64> = (0..64_000)
            .map(|i| (2.0 * std::f64::consts::PI * 700.0 * i as f64 / sr).sin())
            .collect();
        let p = stft_power(&window, &cfg()).unwrap();
        assert_eq!(p.column(126), p.column(125));
        assert_eq!(p.column(127), p.column(125));
        assert_ne!(p.column(124), p.column(125));
    }

    #[test]
    fn excess_frames_are_trimmed_to_target() {
        let mut c = cfg();
        c.target_frames = 10;
        let window = vec![0.25; 64_000];
        let p = stft_power(&window, &c).unwrap();
        assert_eq!(p.dim(), (513, 10));
    }

    #[test]
    fn dc_signal_peaks_at_bin_zero() {
        let p = stft_power(&vec![0.7; 64_000], &cfg()).unwrap();
        for t in 0..128 {
            let col = p.column(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 0);
        }
    }
}
