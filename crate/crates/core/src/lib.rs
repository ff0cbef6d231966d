//! Pseudo Siamese Disentanglement Network for zero-shot accent conversion,
//! trained and evaluated on a synthetic factorized feature benchmark.

pub mod content;
pub mod data;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod nn;
pub mod psdn;
pub mod seed;
pub mod synthgen;
pub mod timbre;
pub mod training;

pub use data::{AccentLabelSet, Dataset, DatasetManifest, Split, Utterance, MEL_DIM};
pub use error::{Error, Result};
pub use matrix::Matrix;
