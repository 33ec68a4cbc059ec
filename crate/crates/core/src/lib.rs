//! Vector-quantized modality bridge for decoder-based speech recognition.
//!
//! Continuous "audio" embeddings from a projector are discretized against a
//! codebook copied from the decoder's token embedding table, either by hard
//! nearest-entry selection with a straight-through gradient or by a top-k
//! weighted sum of entries. Everything runs on a small reverse-mode autodiff
//! engine in `f64`, trained in two stages on a synthetic corpus.

pub mod autograd;
pub mod data;
mod error;
pub mod evalprobe;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod quantizer;
pub mod rng;
pub mod trainkit;

pub use autograd::{AutogradError, Tape, Tensor, Var};
pub use error::{Error, Result};
