pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod generation;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reasoning;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Matrix;
