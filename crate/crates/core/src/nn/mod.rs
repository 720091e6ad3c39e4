//! Differentiable substrate shared by every model component.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{AslParams, AttnSpec, Graph, RowRef, SparseEntry, Var};
pub use params::{Adam, AdamConfig, Gradients, Init, ParamId, ParamStore};
pub use tensor::Tensor;
