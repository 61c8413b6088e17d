//! Post-processing network that restores decoded 4:2:0 video frames, with
//! its training loop, quality metrics and rate-distortion comparison.

pub mod bdrate;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod metrics;
pub mod network;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod yuv;

pub use config::{FusionMode, ModelConfig};
pub use error::{Error, Result};
pub use network::ParameterStore;
pub use tensor::Tensor;
pub use yuv::{Frame444, Yuv420Frame};
