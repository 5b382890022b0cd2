//! Joint crop/weed segmentation and stem detection with a shared-encoder,
//! dual-decoder FC-DenseNet, built on a small tape-based autodiff engine.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod classes;
pub mod dataio;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod netarch;
pub mod preprocess;
pub mod stemextract;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
