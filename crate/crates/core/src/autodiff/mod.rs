//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Everything is generic over [`Real`] so training can run in f32 while
//! gradient checks run in f64.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
pub mod nn;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_gradients, check_piecewise, grad_check, relative_error, GradCheckReport, DEFAULT_STEP, REL_FLOOR};
pub use graph::{Gradients, Graph, Var, NORM_EPS};
pub use nn::{Bound, ParamId, ParamStore};
pub use scalar::{gemm, Real};
pub use tensor::Tensor;
