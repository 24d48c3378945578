//! Speaker-adaptive keyword spotting.
//!
//! `ukws` trains small depthwise-separable CNN keyword classifiers jointly
//! with a table of per-speaker embedding vectors, then adapts to an unseen
//! speaker by updating nothing but that speaker's embedding row. The crate
//! bundles everything the workflow needs:
//!
//! - [`tensor`]: a minimal dense-tensor library with reverse-mode
//!   differentiation for the fixed layer set, Adam, and a finite-difference
//!   gradient checker;
//! - [`audio`]: WAV decoding and MFCC feature extraction;
//! - [`data`]: Google Speech Commands indexing, speaker-threshold splits and
//!   per-speaker few-shot sessions;
//! - [`model`]: DS-CNN S/M/L backbones, the embedding table, feature fusion
//!   and train-policy freezing;
//! - [`train`]: pretraining, per-speaker adaptation sessions, evaluation and
//!   experiment grids;
//! - [`cost`]: an analytic model of parameters, FLOPs, peak training memory
//!   and energy per update strategy;
//! - [`synth`]: a synthetic corpus generator for smoke tests and demos.
//!
//! The narrative guide lives in `book/`; its code snippets are compiled and
//! run as doctests of this crate.

pub mod audio;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

#[cfg(doctest)]
mod book;

pub use error::{KwsError, Result};
pub use tensor::{Parameter, Tensor};
