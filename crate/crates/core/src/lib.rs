//! Kernels for a ResNet-style backbone that accepts images of any size and
//! emits a fixed-size feature map.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. The pieces are:
//!
//! - [`autodiff`]: a small dense-tensor engine with a fixed operation table and
//!   reverse-mode differentiation, plus [`fd`] central-difference oracles.
//! - [`sppr_math`]: integer arithmetic for pyramid levels whose pooled maps can
//!   be reshaped into one square map, and the per-axis pooling parameters.
//! - [`attention`]: positional-encoding multi-head criss-cross attention.
//! - [`spprcsp`]: the reshaping pyramid pooling layer inside a cross-stage
//!   partial block with depthwise-separable convolutions and SE gating.
//! - [`backbone`]: stage assembly, shape tracing and parameter/MAC accounting.
//! - [`gradcheck`]: finite-difference checks for every module.
#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod backbone;
mod error;
pub mod fd;
pub mod gradcheck;
pub mod init;
pub mod optim;
pub mod params;
pub mod sppr_math;
pub mod spprcsp;
pub mod tensor;
pub mod trace;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
