pub mod cae;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod crf;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pgg;
pub mod pipeline;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
