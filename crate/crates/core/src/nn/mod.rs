//! Differentiable kernels, parameter storage and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod layers;
pub mod linalg;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_difference_check, GradCheckEntry, GradCheckReport};
pub use graph::{linear_forward, Gradients, Graph, Var};
pub use layers::{glorot, LinearLayer, Mlp};
pub use params::{Param, ParamGroup, ParamStore};
pub use tensor::Tensor;
