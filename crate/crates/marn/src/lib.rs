//! IO, file formats, configuration, and pipeline orchestration for the
//! memory-attended captioning kit. The numeric core lives in `marn-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;

pub use error::{MarnError, Result};
