//! Merging homologous model checkpoints.
//!
//! [`widen`] scores every column of every weight by how far each model moved
//! from the shared backbone, in magnitude and in direction, and merges with
//! those scores. [`baselines`] holds the usual comparison methods. Both work
//! per tensor on plain `f32` buffers; [`engine`] streams whole safetensors
//! checkpoints through them and [`analysis`] summarizes the scores.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod widen;

pub use error::{Error, ErrorKind, Result};
