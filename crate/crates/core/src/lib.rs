//! Synchronized frame/video query decoding for video instance segmentation.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data_synth;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod heads;
pub mod matching;
pub mod model;
pub mod nn;
pub mod params;
pub mod sync_decoder;
pub mod tensor;
pub mod trainer;

pub use config::{Mode, ModelConfig, SyncMode};
pub use error::{Error, Result};
