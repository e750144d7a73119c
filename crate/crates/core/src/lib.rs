//! Localization-aware channel pruning for a toy single-shot detector.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod metrics;
pub mod prune;
pub mod rng;
pub mod roi;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
