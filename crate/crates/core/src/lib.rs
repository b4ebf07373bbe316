pub mod autodiff;
pub mod backbone;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod sscan;
pub mod tensor;
pub mod trainer;

pub use backbone::{Backbone, ModelConfig};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{AnyTensor, Real, Tensor};
