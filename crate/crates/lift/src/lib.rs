//! Lead-lag aware refinement of multivariate time series forecasts.
//!
//! The crate estimates locally stationary lead-lag relationships between the
//! channels of a multivariate series with an FFT cross-correlation kernel,
//! then refines the predictions of a channel-independent backbone by
//! adaptively mixing frequency components of shift-aligned leading
//! indicators. A shared linear layer is included as the default backbone,
//! together with full reverse-mode gradients, an Adam trainer, and a CLI.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod lead;
pub mod mat;
pub mod model;
pub mod normalize;
pub mod refiner;
pub mod spectral;
pub mod training;

pub use error::{LiftError, Result};
