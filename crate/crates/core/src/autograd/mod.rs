//! Minimal reverse-mode automatic differentiation over 2-D tensors.

mod deform;
mod graph;
mod params;
mod tensor;

pub use deform::{bilinear_sample, DeformLayout, DeformPlan};
pub use graph::{bce_term, focal_term, sigmoid, Graph, SparseRows, Var};
pub use params::{AdamW, AdamWConfig, Grads, ParamId, ParamStore};
pub use tensor::Tensor;
