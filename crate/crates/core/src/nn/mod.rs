//! Minimal dense-matrix neural-network toolkit: storage, parameters and a
//! reverse-mode autodiff tape.

mod graph;
mod matrix;
mod params;

pub use graph::{gelu, sigmoid, Graph, Var};
pub use matrix::{gemm, matmul, Matrix};
pub use params::{Gradients, Param, ParamId, ParamStore};
