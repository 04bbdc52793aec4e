//! CFENet-style single-shot detection on CPU.

pub mod anchors;
pub mod autograd;
pub mod bench;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod postprocess;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Detector32 = network::Detector<f32>;
pub type Detector64 = network::Detector<f64>;
