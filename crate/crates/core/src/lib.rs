//! Tensors, initialization statistics, signal-dissipation probes, frozen
//! coders and PNNH networks, generic over `f32`/`f64`.

pub mod checkpoint;
pub mod coder;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod net;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{ConvWeights, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = net::Network<f32>;
pub type Network64 = net::Network<f64>;
pub type Coder32 = coder::CoderWeights<f32>;
pub type Coder64 = coder::CoderWeights<f64>;
