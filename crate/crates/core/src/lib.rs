//! Few-shot adaptation of a frozen vision transformer with per-channel
//! scale/shift adapters and a proxy-anchor objective.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod backbone;
pub mod classifier;
pub mod episodes;
pub mod error;
pub mod grad;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, FormatError, Result};
pub use tensor::{DType, Rng, Scalar, Tensor};
