use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{load_manifest, read_matrix, DatasetManifest, Split, Utterance};
use crate::error::{Error, Result};
use crate::synthgen::{FactorsRecord, Generator, GeneratorRecord, FACTORS_FILE, GENERATOR_RECORD_FILE};

/// A manifest with its tensors loaded and, for synthetic data, the generator
/// and per-utterance factors attached.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub utterances: Vec<Utterance>,
    pub generator: Option<Generator>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let record_path = manifest.root.join(GENERATOR_RECORD_FILE);
        let generator = if record_path.exists() {
            Some(Generator::new(&GeneratorRecord::load(&record_path)?.config)?)
        } else {
            None
        };

        let mut records: HashMap<String, FactorsRecord> = HashMap::new();
        let factors_path = manifest.root.join(FACTORS_FILE);
        if generator.is_some() && factors_path.exists() {
            let text = fs::read_to_string(&factors_path).map_err(|e| Error::io(&factors_path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: FactorsRecord = serde_json::from_str(line)
                    .map_err(|e| Error::json(format!("{}:{}", factors_path.display(), i + 1), e))?;
                records.insert(r.id.clone(), r);
            }
        }

        let mut utterances = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let mel = read_matrix(&manifest.resolve(&entry.mel_path))?;
            let bnf = read_matrix(&manifest.resolve(&entry.bnf_path))?;
            let factors = match (&generator, records.get(&entry.id)) {
                (Some(g), Some(r)) => {
                    let f = g.factors_from_record(r)?;
                    if f.frames() != mel.rows() || f.accent_id != entry.accent_label {
                        return Err(Error::Dataset(format!(
                            "factors for {} do not match its tensors",
                            entry.id
                        )));
                    }
                    Some(f)
                }
                _ => None,
            };
            utterances.push(Utterance::new(
                entry.id.clone(),
                entry.speaker_id.clone(),
                entry.accent_label,
                mel,
                bnf,
                factors,
                entry.split,
            )?);
        }
        Ok(Self {
            manifest,
            utterances,
            generator,
        })
    }

    pub fn num_other_accents(&self) -> usize {
        self.manifest.num_other_accents
    }

    pub fn digest(&self) -> &str {
        &self.manifest.generator_config_digest
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bnf_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.bnf.cols())
    }

    pub fn generator(&self) -> Result<&Generator> {
        self.generator
            .as_ref()
            .ok_or_else(|| Error::Dataset("dataset has no synthetic generator record".into()))
    }
}
