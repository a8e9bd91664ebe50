//! Learnable lifting-wavelet network for reconstructing ECG waveforms from
//! radar chest-displacement signals.
//!
//! The crate bundles everything needed to train and evaluate the model on a
//! single CPU: a small reverse-mode autodiff engine for `[length, channels]`
//! tensors, the lifting network itself, a multi-resolution STFT loss, an Adam
//! training loop with checkpoints, data ingestion and synthetic pair
//! generation, and R-peak based vitals metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod params;
pub mod selfcheck;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod vitals;

pub use error::{Error, Result};
pub use network::{Model, ModelConfig};
pub use tensor::{Real, Tensor};

/// Sampling rate every chunk is brought to.
pub const SAMPLE_RATE_HZ: f64 = 200.0;
/// Samples per chunk (5.12 s at 200 Hz).
pub const CHUNK_LEN: usize = 1024;
