//! Reverse-mode differentiation over dense `f32`/`f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the record in reverse. Heavy operations (bilinear plane lookup,
//! volume compositing, soft histograms, pyramid blur) are single fused nodes
//! with hand-written adjoints, everything else is elementwise or linear.

mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use check::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use graph::{BinaryOp, CustomOp, Gradients, Graph, UnaryOp, Var};
pub use kernels::{composite_layout, sample_weights, CompositeConsts, CompositeLayout};
pub use tensor::{Real, Tensor};
