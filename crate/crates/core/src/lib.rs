//! Early attentive sparsification for encoder-decoder speech recognition.
//!
//! A dense CPU transformer engine with a hook that shortens the encoder
//! sequence after a chosen layer, plus the WER/RTF evaluation, grid search
//! and profiling tools built around it.

pub mod crossval;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod io;
pub mod metrics;
pub mod model;
pub mod profiler;
pub mod search;
pub mod sparsifier;
pub mod tensor;

pub use error::{Error, Result};
