//! Statistical process control for stochastic textured surfaces.
//!
//! A regression tree learns the in-control conditional mean of each pixel
//! given its causal neighborhood. Residuals of new images are summarised by
//! spatial moving statistics (Anderson-Darling or Box-Pierce type), the image
//! maximum is charted against a Phase I control limit, and pixels above a
//! diagnostic threshold are rendered as a binary diagnostic image.

pub mod baselines;
pub mod bundle;
pub mod error;
pub mod experiment;
pub mod image;
pub mod io;
mod kernel;
pub mod model;
pub mod monitor;
pub mod quantile;
pub mod refcdf;
pub mod simulator;
pub mod sms;
pub mod tree;

pub use error::{Error, Result};
