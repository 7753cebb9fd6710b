//! Hyperspectral image classification with gated spatial/spectral tokens,
//! single-level Haar subbands and a ReLU state-space recurrence, on top of a
//! small reverse-mode autodiff core.

pub mod error;
pub mod hsi_io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod train;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
