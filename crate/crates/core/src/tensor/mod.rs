//! Dense `f64` tensors, forward kernels and a reverse-mode recording graph.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod rng;

pub use array::Tensor;
pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::{conv1d, layer_norm, matmul, maxpool_time, softmax};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use rng::RngState;
