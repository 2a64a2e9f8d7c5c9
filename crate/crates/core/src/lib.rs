//! Multi-scale decomposition MLP-Mixer for time series.

pub mod autograd;
pub mod config;
pub mod data;
mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod optim;
pub mod params;
pub mod patching;
mod real;
pub mod report;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
