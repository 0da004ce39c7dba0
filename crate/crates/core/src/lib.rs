//! Siamese fully convolutional change detection.

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod fsutil;
pub mod glimpse;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
