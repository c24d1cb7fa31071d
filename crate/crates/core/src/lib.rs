//! Key-motion-first speech-driven facial animation on a synthetic corpus.
//!
//! The pipeline locates key frames from a phoneme alignment, predicts the
//! face at those frames from audio, then completes the remaining frames with a
//! gated cross-modal model. All frame and vertex indices are 0-based.

pub mod audio;
pub mod cmc;
pub mod container;
pub mod error;
pub mod eval;
pub mod harness;
pub mod lkma;
pub mod model;
pub mod nn;
pub mod obj;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
