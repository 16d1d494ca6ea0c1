//! File formats, checkpoints and run plumbing around `icnet-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod icvol;
pub mod image;
pub mod landmarks;
pub mod run;

pub use error::{IoError, Result};
