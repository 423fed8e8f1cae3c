//! Minimal reverse-mode array engine: exactly the primitives the encoders
//! and losses use, Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{relative_error, GradCheck, GradReport};
pub use graph::{BatchStats, BnMode, Graph, OpKind, Var, BN_EPS, NORM_EPS};
pub use tensor::{DType, Scalar, Tensor};
