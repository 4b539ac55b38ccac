//! A small reverse-mode autodiff engine: tensors, parameter storage, the
//! recording graph, and the AdamW optimiser.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;
pub mod window;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, Unary, Var, LN_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
