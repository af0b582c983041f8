pub mod admission;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod gradsuite;
pub mod nn;
pub mod stay;
pub mod tensor;

pub use error::{Error, Result};
