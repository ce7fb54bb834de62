pub mod channel;
pub mod classic;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod geometry;
pub mod manifest;
pub mod nn;
pub mod perception;
pub mod pipeline;
pub mod scenes;
pub mod selector;
pub mod training;

pub use error::{Error, Result};
