//! Core library for a low-complexity deepfake-speech detector.
//!
//! Pipeline overview:
//! 1. [`dsp`] turns 16 kHz mono audio into 3-channel linear-filterbank
//!    log-spectrogram tensors (base + delta + delta-delta).
//! 2. [`model`] runs a Depthwise-Inception Network over those tensors and
//!    emits fixed-dimension utterance embeddings.
//! 3. [`train`] fits the network in two supervised stages (multi-loss, then
//!    entropy fine-tuning) and then fits a bonafide Gaussian.
//! 4. [`score`] ranks utterances by Mahalanobis distance to the bonafide
//!    Gaussian; [`metrics`] turns labeled scores into EER/AUC/accuracy/F1.
//!
//! All numerics run in `f64`; file formats store `f32` features and weights.

pub mod config;
pub mod dsp;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod score;
pub mod synth;
pub mod train;

pub use error::{DinError, Result};
