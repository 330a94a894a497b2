//! Synthetic three-class dataset for desk-scale pipeline runs.
//!
//! Three deterministic recipes at 16 kHz stand in for the real corpus:
//! - bonafide: a harmonic stack with random vibrato and formant-like
//!   spectral envelopes;
//! - TTS-proxy: amplitude-modulated filtered noise;
//! - VC-proxy: a constant-pitch harmonic stack with phase-regularized
//!   partials (partial k locked to k times a single base phase).
//!
//! Every waveform derives from `(seed, class, index)` RNG streams, so a
//! spec generates byte-identical output on every run. The generator
//! emits WAVs under `<out>/wav/` plus CM-format protocol files: one
//! with all rows and one per 60/20/20 train/dev/eval split.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dsp::EXPECTED_SAMPLE_RATE;
use crate::error::{DinError, Result};
use crate::io::atomic_write;
use crate::io::wav::write_wav;
use crate::rng;

/// What to synthesize. Loaded from a TOML document; unknown keys are
/// errors so typos cannot silently change a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    /// WAVs per class (bonafide, TTS-proxy, VC-proxy).
    pub n_per_class: usize,
    /// Clip length in seconds; every clip has the same length.
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec { n_per_class: 10, duration_s: 2.0, seed: 7 }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(DinError::config("n_per_class must be >= 1"));
        }
        if self.n_per_class > 9999 {
            return Err(DinError::config("n_per_class must be <= 9999 (4-digit utt ids)"));
        }
        if !self.duration_s.is_finite() || self.duration_s < 0.1 {
            return Err(DinError::config(format!(
                "duration_s must be a finite value >= 0.1, got {}",
                self.duration_s
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DinError::io(path, e))?;
        let spec: SyntheticDatasetSpec = toml::from_str(&text)
            .map_err(|e| DinError::format(path, format!("not a valid synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| DinError::data(format!("cannot serialize synth spec: {e}")))?;
        atomic_write(path, text.as_bytes())
    }
}

/// Where a generation run put its files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOutput {
    pub wav_dir: PathBuf,
    pub protocol_all: PathBuf,
    pub protocol_train: PathBuf,
    pub protocol_dev: PathBuf,
    pub protocol_eval: PathBuf,
    pub n_wavs: usize,
    /// Rows per split over all classes: (train, dev, eval).
    pub split_sizes: (usize, usize, usize),
}

#[derive(Clone)]
struct Row {
    speaker: &'static str,
    utt_id: String,
    system_id: String,
    key: &'static str,
}

impl Row {
    fn line(&self) -> String {
        format!("{} {} - {} {}", self.speaker, self.utt_id, self.system_id, self.key)
    }
}

/// Generate the dataset under `out_dir`: WAVs in `<out_dir>/wav/` and
/// protocol files `protocol_all.txt` / `protocol_{train,dev,eval}.txt`
/// in `out_dir` itself. Deterministic per spec; reruns overwrite with
/// identical bytes.
pub fn generate_synthetic_dataset(
    spec: &SyntheticDatasetSpec,
    out_dir: &Path,
) -> Result<SynthOutput> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| DinError::io(&wav_dir, e))?;
    let n_samples = (spec.duration_s * EXPECTED_SAMPLE_RATE as f64).round() as usize;

    let n = spec.n_per_class;
    let mut splits: [Vec<Row>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class_idx, class) in ["bonafide", "tts", "vc"].iter().enumerate() {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng::stream(spec.seed, &format!("synth/{class}"), i as u64);
            let (row, samples) = match class_idx {
                0 => (
                    Row {
                        speaker: "SYNB",
                        utt_id: format!("SYN_B_{:04}", i + 1),
                        system_id: "-".into(),
                        key: "bonafide",
                    },
                    bonafide_clip(&mut r, n_samples),
                ),
                1 => (
                    Row {
                        speaker: "SYNT",
                        utt_id: format!("SYN_T_{:04}", i + 1),
                        system_id: format!("A{:02}", 1 + i % 4),
                        key: "spoof",
                    },
                    tts_proxy_clip(&mut r, n_samples, i % 4),
                ),
                _ => (
                    Row {
                        speaker: "SYNV",
                        utt_id: format!("SYN_V_{:04}", i + 1),
                        system_id: format!("A{:02}", 5 + i % 2),
                        key: "spoof",
                    },
                    vc_proxy_clip(&mut r, n_samples, i % 2),
                ),
            };
            write_wav(&wav_dir.join(format!("{}.wav", row.utt_id)), &samples, EXPECTED_SAMPLE_RATE)?;
            rows.push(row);
        }

        // 60/20/20 per class by seeded shuffle, remainders into eval.
        let mut order: Vec<usize> = (0..n).collect();
        let mut split_rng = rng::stream(spec.seed, "synth/split", class_idx as u64);
        order.shuffle(&mut split_rng);
        let n_train = n * 6 / 10;
        let n_dev = n * 2 / 10;
        for (pos, &i) in order.iter().enumerate() {
            let bucket = if pos < n_train {
                0
            } else if pos < n_train + n_dev {
                1
            } else {
                2
            };
            splits[bucket].push(rows[i].clone());
        }
    }

    let mut all: Vec<&Row> = splits.iter().flatten().collect();
    all.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let protocol_all = out_dir.join("protocol_all.txt");
    write_protocol(&protocol_all, &all)?;

    let names = ["protocol_train.txt", "protocol_dev.txt", "protocol_eval.txt"];
    let mut paths = Vec::with_capacity(3);
    for (split, name) in splits.iter_mut().zip(names) {
        split.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        let path = out_dir.join(name);
        let refs: Vec<&Row> = split.iter().collect();
        write_protocol(&path, &refs)?;
        paths.push(path);
    }

    Ok(SynthOutput {
        wav_dir,
        protocol_all,
        protocol_eval: paths.pop().unwrap(),
        protocol_dev: paths.pop().unwrap(),
        protocol_train: paths.pop().unwrap(),
        n_wavs: 3 * n,
        split_sizes: (splits[0].len(), splits[1].len(), splits[2].len()),
    })
}

fn write_protocol(path: &Path, rows: &[&Row]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&row.line());
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

const PEAK: f64 = 0.45;
/// Keep partials below this frequency (well under Nyquist at 16 kHz).
const MAX_PARTIAL_HZ: f64 = 7000.0;
const MAX_PARTIALS: usize = 40;

fn fs() -> f64 {
    EXPECTED_SAMPLE_RATE as f64
}

/// Harmonic stack with vibrato and a 3-formant spectral envelope.
fn bonafide_clip<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    let f0 = r.random_range(100.0..240.0);
    let vib_rate = r.random_range(4.5..7.0);
    let vib_depth = r.random_range(0.01..0.03);
    let vib_phase = r.random_range(0.0..2.0 * PI);
    let formants = [
        (r.random_range(300.0..900.0), r.random_range(80.0..160.0)),
        (r.random_range(1000.0..2200.0), r.random_range(120.0..250.0)),
        (r.random_range(2400.0..3400.0), r.random_range(150.0..300.0)),
    ];
    let envelope = |f: f64| -> f64 {
        formants
            .iter()
            .map(|&(c, w): &(f64, f64)| (-(f - c) * (f - c) / (2.0 * w * w)).exp())
            .sum::<f64>()
            + 0.02
    };
    let k_max = ((MAX_PARTIAL_HZ / f0) as usize).clamp(1, MAX_PARTIALS);
    let amps: Vec<f64> = (1..=k_max).map(|k| envelope(k as f64 * f0) / k as f64).collect();
    let phases: Vec<f64> = (0..k_max).map(|_| r.random_range(0.0..2.0 * PI)).collect();
    let am_rate = r.random_range(1.5..3.5);
    let am_phase = r.random_range(0.0..2.0 * PI);

    let mut base_phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let tt = t as f64 / fs();
        let inst_f0 = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * tt + vib_phase).sin());
        base_phase += 2.0 * PI * inst_f0 / fs();
        let mut s = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            s += a * ((k + 1) as f64 * base_phase + p).sin();
        }
        let am = 1.0 + 0.15 * (2.0 * PI * am_rate * tt + am_phase).sin();
        out.push(s * am + 0.003 * rng::sample_standard_normal(r));
    }
    finalize(r, out)
}

/// Amplitude-modulated filtered noise. `variant` nudges the filter
/// cutoff and modulation-rate bands so the four TTS generator ids carry
/// distinguishable (but same-family) signatures.
fn tts_proxy_clip<R: Rng>(r: &mut R, n: usize, variant: usize) -> Vec<f64> {
    let cutoff = 1200.0 + 900.0 * variant as f64 + r.random_range(-250.0..250.0);
    let hp_cut = r.random_range(80.0..200.0);
    let am_rate = 2.0 + 2.2 * variant as f64 + r.random_range(0.0..1.2);
    let am_depth = r.random_range(0.5..0.85);
    let am_phase = r.random_range(0.0..2.0 * PI);

    let a_lp = 1.0 - (-2.0 * PI * cutoff / fs()).exp();
    let a_hp = 1.0 - (-2.0 * PI * hp_cut / fs()).exp();
    let (mut lp1, mut lp2, mut dc) = (0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let white = rng::sample_standard_normal(r);
        lp1 += a_lp * (white - lp1); // two poles: 12 dB/octave rolloff
        lp2 += a_lp * (lp1 - lp2);
        dc += a_hp * (lp2 - dc);
        let band = lp2 - dc;
        let tt = t as f64 / fs();
        let am = (1.0 + am_depth * (2.0 * PI * am_rate * tt + am_phase).sin()) / (1.0 + am_depth);
        out.push(band * am);
    }
    finalize(r, out)
}

/// Constant-pitch harmonic stack with phase-regularized partials
/// (partial k at phase k*phi0) and a single broad spectral bump.
fn vc_proxy_clip<R: Rng>(r: &mut R, n: usize, variant: usize) -> Vec<f64> {
    let f0 = if variant == 0 {
        r.random_range(110.0..150.0)
    } else {
        r.random_range(170.0..230.0)
    };
    let center = 900.0 + 800.0 * variant as f64 + r.random_range(-100.0..100.0);
    let width = r.random_range(500.0..700.0);
    let phi0 = r.random_range(0.0..2.0 * PI);
    let k_max = ((MAX_PARTIAL_HZ / f0) as usize).clamp(1, MAX_PARTIALS);
    let amps: Vec<f64> = (1..=k_max)
        .map(|k| {
            let f = k as f64 * f0;
            ((-(f - center) * (f - center) / (2.0 * width * width)).exp() + 0.01)
                / (k as f64).sqrt()
        })
        .collect();

    let step = 2.0 * PI * f0 / fs();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let base = step * t as f64;
        let mut s = 0.0;
        for (k, &a) in amps.iter().enumerate() {
            let kk = (k + 1) as f64;
            s += a * (kk * base + kk * phi0).sin();
        }
        out.push(s);
    }
    finalize(r, out)
}

/// Shared post-processing: 50 ms attack / 100 ms release ramps, then
/// peak normalization to a slightly randomized level below full scale.
fn finalize<R: Rng>(r: &mut R, mut samples: Vec<f64>) -> Vec<f64> {
    let n = samples.len();
    let attack = ((0.05 * fs()) as usize).min(n / 2).max(1);
    let release = ((0.1 * fs()) as usize).min(n / 2).max(1);
    for t in 0..attack {
        samples[t] *= t as f64 / attack as f64;
    }
    for t in 0..release {
        samples[n - 1 - t] *= t as f64 / release as f64;
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let target = PEAK * r.random_range(0.92..1.0);
    if peak > 0.0 {
        let g = target / peak;
        for v in &mut samples {
            *v *= g;
        }
    }
    samples
}
