pub mod activations;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod quantize;
pub mod scalar;
pub mod spike;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use ssm::{Mode, Model, ModelConfig, Site};
pub use tensor::Tensor;
pub use train::TrainConfig;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
