pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod loss;
pub mod mask;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Padding, TensorId};
pub use tensor::Tensor;
