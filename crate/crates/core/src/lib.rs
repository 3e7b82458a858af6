//! Multi-label movie genre classification from poster images.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode autodiff tape.
//! - [`data`]: genre vocabulary, poster manifests, splits and image loading.
//! - [`patch`]: patch tiling and the convolutional patch embedding.
//! - [`params`]: named parameter storage and graph binding.
//! - [`model`]: attention encoder blocks joined by dense transitions, plus the
//!   classification head, assembled into the three architectures.
//! - [`train`]: asymmetric loss with Adam and early-stopped training.
//! - [`ensemble`]: weighted-mean fusion of three base models and simplex grid search.
//! - [`refine`]: conditional genre-association tables and variable-count genre selection.
//! - [`metrics`]: macro multi-label metrics and text/CSV reports.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod patch;
pub mod refine;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
