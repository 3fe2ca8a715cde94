//! Adversarial training of a small image classifier with angular
//! metric-learning regularization over sensitivity (FGSM) and invariance
//! (label-changing) perturbations, plus the evaluation and embedding
//! analytics around it.

pub mod attacks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
