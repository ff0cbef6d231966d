//! Shared data model: utterances, dataset manifests and the tensor file format.

mod dataset;
mod manifest;
pub mod tensor_file;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synthgen::SynthFactors;

pub use dataset::Dataset;
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestEntry};
pub use tensor_file::{read_matrix, read_tensor, write_matrix, write_tensor, TensorData};

/// Number of mel channels. Fixed across the crate.
pub const MEL_DIM: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Accent label with the target/other partition used by the adversarial classifier.
///
/// Label 0 is the target accent, labels `1..=num_other` are the other accents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccentLabelSet {
    pub accent_label: usize,
    pub num_other: usize,
}

impl AccentLabelSet {
    pub fn new(accent_label: usize, num_other: usize) -> Result<Self> {
        if num_other < 1 {
            return Err(Error::Config("at least one non-target accent is required".into()));
        }
        if accent_label > num_other {
            return Err(Error::Contract(format!(
                "accent label {accent_label} outside [0, {num_other}]"
            )));
        }
        Ok(Self {
            accent_label,
            num_other,
        })
    }

    pub fn is_target(&self) -> bool {
        self.accent_label == 0
    }

    /// Class index for the binary target-vs-other task.
    pub fn binary_class(&self) -> usize {
        usize::from(!self.is_target())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub accent_label: usize,
    /// `[T × 80]` log-mel features.
    pub mel: Matrix,
    /// `[T × D_bnf]` bottleneck features, frame-aligned with `mel`.
    pub bnf: Matrix,
    pub factors: Option<SynthFactors>,
    pub split: Split,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        speaker_id: impl Into<String>,
        accent_label: usize,
        mel: Matrix,
        bnf: Matrix,
        factors: Option<SynthFactors>,
        split: Split,
    ) -> Result<Self> {
        let id = id.into();
        if mel.rows() == 0 {
            return Err(Error::Shape(format!("{id}: empty utterance")));
        }
        if mel.cols() != MEL_DIM {
            return Err(Error::Shape(format!(
                "{id}: mel has {} channels, expected {MEL_DIM}",
                mel.cols()
            )));
        }
        if mel.rows() != bnf.rows() {
            return Err(Error::Shape(format!(
                "{id}: mel has {} frames but bnf has {}",
                mel.rows(),
                bnf.rows()
            )));
        }
        Ok(Self {
            id,
            speaker_id: speaker_id.into(),
            accent_label,
            mel,
            bnf,
            factors,
            split,
        })
    }

    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn is_target(&self) -> bool {
        self.accent_label == 0
    }
}
