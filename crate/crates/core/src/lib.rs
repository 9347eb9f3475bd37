//! Weakly supervised two-level point-cloud segmentation with a discrete
//! latent part layer.
//!
//! An encoder maps a cloud to per-point categorical distributions over
//! latent sub-part classes; a decoder predicts top-level part labels from
//! encoder features conditioned on a latent sample. Three training
//! pipelines are provided: most-probable-latent with a straight-through
//! gradient, Monte Carlo with a score-function gradient, and Monte Carlo
//! with a Gumbel-softmax pathwise gradient.

pub mod checks;
pub mod data;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
