//! Retrieval-gated prompt editing of a small frozen language model.

pub mod container;
pub mod dataset;
pub mod diagnostics;
pub mod editor;
pub mod encoder;
pub mod error;
pub mod evaluation;
mod init;
pub mod kb;
pub mod lm;
pub mod prompt_encoder;
pub mod synthetic;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
