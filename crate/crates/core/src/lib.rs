pub mod data;
pub mod diffusion;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod layered;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod prompt;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
