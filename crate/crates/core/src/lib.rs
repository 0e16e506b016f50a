//! AV2vec at desk scale: audio-visual self-distillation with an EMA teacher,
//! optional MLM targets from k-means, and a small autodiff engine to train it.

pub mod autograd;
pub mod cluster;
pub mod config;
pub mod corruption;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod features;
pub mod model;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainkit;

pub use error::{Error, Result};
pub use tensor::Matrix;
