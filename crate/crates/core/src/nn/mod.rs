//! Minimal neural-network toolkit: parameters, a differentiable graph, Adam
//! and a few layers.

mod graph;
pub mod layers;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{read_blob, Param, ParamBuilder, ParamId, ParamStore};
