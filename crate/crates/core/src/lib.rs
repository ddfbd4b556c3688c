//! Two-stage video virtual try-on at desk scale.
//!
//! Stage I ([`tryon`]) aligns a model image to each frame's pose with a
//! learned appearance flow and replaces clothing/face regions pixel-wise.
//! Stage II ([`memory`]) refines the per-frame results by attending over
//! key/value embeddings of past frames. [`losses`], [`disc`] and [`train`]
//! provide the objectives and loops; [`eval`] implements FID and the cycle
//! transfer score.

pub mod config;
pub mod data;
pub mod disc;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod tryon;

pub mod checkpoint;
pub mod cli;

pub use error::{Error, Result};
