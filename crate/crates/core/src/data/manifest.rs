use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Split;
use crate::error::{Error, Result};
use crate::synthgen::{GeneratorRecord, GENERATOR_RECORD_FILE};

/// One JSON line of a manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker_id: String,
    pub accent_label: usize,
    pub mel_path: String,
    pub bnf_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Digest recorded beside a generated manifest, or the SHA-256 of the
    /// manifest bytes when there is no generator record.
    pub generator_config_digest: String,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub num_other_accents: usize,
}

impl DatasetManifest {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let record_path = root.join(GENERATOR_RECORD_FILE);
    let record = if record_path.exists() {
        Some(GeneratorRecord::load(&record_path)?)
    } else {
        None
    };

    let mut entries = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        entries.push(entry);
        lines.push(line_no);
    }

    let num_other_accents = match &record {
        Some(r) => r.config.num_other_accents,
        None => entries.iter().map(|e| e.accent_label).max().unwrap_or(0).max(1),
    };

    let mut seen = HashSet::new();
    for (entry, &line) in entries.iter().zip(&lines) {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::Manifest {
                line,
                message: format!("duplicate id {}", entry.id),
            });
        }
        if entry.accent_label > num_other_accents {
            return Err(Error::Manifest {
                line,
                message: format!(
                    "unknown accent label {} (expected 0..={num_other_accents})",
                    entry.accent_label
                ),
            });
        }
        for rel in [&entry.mel_path, &entry.bnf_path] {
            if !root.join(rel).is_file() {
                return Err(Error::Manifest {
                    line,
                    message: format!("missing file {rel}"),
                });
            }
        }
    }

    let train_target = entries
        .iter()
        .any(|e| e.split == Split::Train && e.accent_label == 0);
    if !train_target {
        return Err(Error::Dataset("no target-accent training data".into()));
    }
    let train_other = entries
        .iter()
        .any(|e| e.split == Split::Train && e.accent_label != 0);
    if !train_other {
        return Err(Error::Dataset("no other-accent training data".into()));
    }

    let generator_config_digest = match record {
        Some(r) => r.digest,
        None => hex::encode(Sha256::digest(text.as_bytes())),
    };

    Ok(DatasetManifest {
        entries,
        generator_config_digest,
        root,
        num_other_accents,
    })
}

/// Write entries as JSON lines, one per entry, in the given order.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut out, entry).map_err(|e| Error::json("manifest entry", e))?;
        out.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
