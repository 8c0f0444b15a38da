//! Dense `f64` tensors with a small reverse-mode autodiff tape.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::Tensor;
pub use gradcheck::{check_gradients, GRADCHECK_STEP};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};

#[cfg(test)]
mod tests;
