use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

impl Quantiles {
    pub fn of_sorted(sorted: &[f64]) -> Self {
        Self {
            p10: super::quantile(sorted, 0.1),
            p50: super::quantile(sorted, 0.5),
            p90: super::quantile(sorted, 0.9),
        }
    }
}

/// Surrogate evaluation of one checkpoint. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub probe_accent_accuracy_on_content: f64,
    pub probe_chance_level: f64,
    pub accentedness_rate: f64,
    pub l1_to_oracle_target: f64,
    pub l1_to_source: f64,
    pub conversion_win_rate: f64,
    pub timbre_gain_error: f64,
    pub variant: String,
    pub dataset_digest: String,
    pub checkpoint_step: usize,
    /// Always true: every number here comes from an automated stand-in for a listening test.
    pub surrogate: bool,
    pub conversion_win_rate_ci: [f64; 2],
    pub timbre_gain_error_quantiles: Quantiles,
    pub timbre_degenerate_channels: usize,
    pub target_reconstruction_l1: f64,
    pub reference_classifier_accuracy: f64,
    pub test_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub probe_accent_accuracy_on_content: f64,
    pub probe_chance_level: f64,
    pub probe_train_accuracy: f64,
    pub variant: String,
    pub dataset_digest: String,
    pub checkpoint_step: usize,
}

pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::json("report", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
