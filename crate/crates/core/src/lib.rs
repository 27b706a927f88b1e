//! BiDepth multimodal forecaster.
//!
//! A bidirectional-depth convolutional encoder (two complementary per-frame
//! depth schedules over one shared convolution stack) feeding a convolutional
//! self-attention cell or a ConvLSTM, together with the data pipeline,
//! training loop, metrics and significance tests needed to run experiments.

pub mod bidepth;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod timeseries;
pub mod training;

pub use error::{Error, Result};
