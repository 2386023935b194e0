//! Joint monocular depth prediction and completion with sparse auxiliary
//! networks.
//!
//! An RGB encoder-decoder predicts dense depth from an image. When sparse
//! depth measurements are available, a chain of sparse residual blocks
//! encodes them and the densified features are added into the RGB skip
//! connections, turning the same network into a depth completer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod depthnet;
pub mod error;
pub mod exec;
pub mod grad;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod scalar;
pub mod sparse_conv;
pub mod sparse_tensor;
pub mod srb_san;
pub mod study;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use scalar::Scalar;
