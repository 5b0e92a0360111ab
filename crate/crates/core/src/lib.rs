//! Mixed-channels transformer forecasting for multivariate time series.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors and a reverse-mode autodiff tape.
//! * [`data`]: CSV loading, chronological splits, scaling, windowing and
//!   synthetic generators.
//! * [`model`]: reversible instance normalisation, channel mixing, patch
//!   projection, the transformer encoder and the linear baseline.
//! * [`training`]: losses, Adam, the training loop, evaluation and
//!   checkpoints.
//! * [`analysis`]: rolling correlation and mix-count ablation sweeps.

pub mod analysis;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
