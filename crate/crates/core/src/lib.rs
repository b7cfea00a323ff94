pub mod geometry;
pub mod gradsuite;
pub mod imageio;
pub mod model;
pub mod objectives;
pub mod persist;
pub mod raster;
pub mod scenes;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use tensor::{DType, Float, Tensor, TensorError};
