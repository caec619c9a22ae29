//! Dense tensors, a define-by-run graph with reverse-mode gradients,
//! parameter storage and optimizers.

mod check;
mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{all_coordinates, check_gradients, relative_error, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, NormMode};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Kind, ParamStore};
pub use tensor::Tensor;
