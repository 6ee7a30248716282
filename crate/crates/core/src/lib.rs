//! Progressive label distillation for input-efficient keyword spotting.

pub mod audio;
pub mod chain;
pub mod checkpoint;
pub mod dataset;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod kv;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
