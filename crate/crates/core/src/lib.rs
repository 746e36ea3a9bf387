//! Coarse-to-fine annotation of scanned map sheets.
//!
//! Image-level labels from a vision LLM train a small attention classifier per
//! foreground class; iterated arg-max attention then turns each classified
//! patch into a per-token annotation map that is scored against ground truth
//! at token and pixel resolution.

pub mod attnmap;
pub mod colormap;
pub mod config;
pub mod draw;
pub mod error;
pub mod evaluator;
pub mod labels;
pub mod llm;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tiler;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use rng::Rng;
pub use types::*;
