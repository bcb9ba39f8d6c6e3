//! Explanation-regularized calibration training for small text classifiers.
//!
//! The crate bundles a minimal reverse-mode autodiff kernel, a two-layer
//! self-attention classifier, attention-gradient attributions, the pairwise
//! hinge regularizer that ties attribution magnitude to prediction
//! correctness, and a calibration evaluation suite (ECE, reliability
//! diagrams, temperature scaling, label smoothing).

pub mod attribution;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod posthoc;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

#[cfg(any(test, feature = "testutil"))]
pub mod gradcheck;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
