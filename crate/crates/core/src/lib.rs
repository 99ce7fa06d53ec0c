//! CPU deep-learning micro-framework built around learnable perceptron pooling
//! and upscaling layers.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod model;
pub mod optim;
pub mod perceptron;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{Layer, Mode, Param};
pub use perceptron::{MlpPoolStack, PerceptronPool, PerceptronSpec, PerceptronUpsample, SharingMode};
pub use tensor::{Scalar, Shape4, Tensor4};
