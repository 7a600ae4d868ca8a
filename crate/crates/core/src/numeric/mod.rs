//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
pub mod rng;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use graph::{softmax_in_place, Graph, Var, LAYER_NORM_EPS};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
