//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod kernels;
mod rng;
mod value;

pub use gradcheck::{check_gradient, check_gradient_at, GradCheck};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use rng::RngStream;
pub use value::Tensor;
