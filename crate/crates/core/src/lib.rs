//! Frequency-guided conditional diffusion denoising for quasi-periodic
//! physiological signals.
//!
//! The pipeline reconstructs a clean pulse waveform from a noisy multi-region
//! temporal map by iterative diffusion denoising. Every denoising layer first
//! cleans the latent in the frequency domain (ideal bandpass, learnable
//! complex spectrum modulation, adaptive energy thresholding) and then fuses
//! the frequency prior back into the time-domain latent with cross-attention
//! over the region and time axes.

pub mod autodiff;
pub mod cli;
pub mod crl;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pfd;
pub mod training;

pub use error::{Error, Result};
