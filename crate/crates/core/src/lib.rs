//! Bayesian variational autoencoder with multi-head attention for
//! uncertainty-aware anomaly detection on 2D image slices.

pub mod anomaly;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
