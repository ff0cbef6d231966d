//! Checkpoint directory layout:
//! `params/<name>.psdn`, `index.json`, `config.json`, `optimizer/`, `curve.jsonl`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::{read_matrix, write_matrix};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Moments};
use crate::psdn::{Model, ModelConfig, Variant};

pub const CURVE_FILE: &str = "curve.jsonl";
const INDEX_FILE: &str = "index.json";
const CONFIG_FILE: &str = "config.json";
const PARAMS_DIR: &str = "params";
const OPTIMIZER_DIR: &str = "optimizer";
const OPTIMIZER_STATE: &str = "state.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    file: String,
    shape: [usize; 2],
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    step: usize,
    variant: Variant,
    seed: u64,
    dataset_digest: String,
    model: ModelConfig,
    params: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerState {
    config: AdamConfig,
    /// Per-parameter update counts; parameters never updated are absent.
    steps: BTreeMap<String, u64>,
}

/// A reloaded training snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub step: usize,
    pub dataset_digest: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

impl Checkpoint {
    /// Writes (or overwrites) a checkpoint in `dir`.
    pub fn save(
        dir: &Path,
        model: &Model,
        optimizer: Option<&Adam>,
        config: &TrainConfig,
        step: usize,
        dataset_digest: &str,
    ) -> Result<()> {
        let params_dir = dir.join(PARAMS_DIR);
        fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
        let store = &model.store;
        let mut params = Vec::with_capacity(store.len());
        for id in store.ids() {
            let name = store.name(id).to_string();
            let file = format!("{PARAMS_DIR}/{name}.psdn");
            let value = store.value(id);
            write_matrix(&dir.join(&file), value)?;
            params.push(IndexEntry {
                name,
                file,
                shape: [value.rows(), value.cols()],
                trainable: store.is_trainable(id),
            });
        }
        let index = Index {
            step,
            variant: model.variant,
            seed: config.seed,
            dataset_digest: dataset_digest.to_string(),
            model: model.config.clone(),
            params,
        };
        write_json(&dir.join(INDEX_FILE), &index)?;
        write_json(&dir.join(CONFIG_FILE), config)?;

        if let Some(adam) = optimizer {
            let opt_dir = dir.join(OPTIMIZER_DIR);
            fs::create_dir_all(&opt_dir).map_err(|e| Error::io(&opt_dir, e))?;
            let mut steps = BTreeMap::new();
            for id in store.ids() {
                if let Some(m) = adam.moments(id) {
                    let name = store.name(id);
                    write_matrix(&opt_dir.join(format!("{name}.m.psdn")), &m.m)?;
                    write_matrix(&opt_dir.join(format!("{name}.v.psdn")), &m.v)?;
                    steps.insert(name.to_string(), m.step);
                }
            }
            write_json(
                &opt_dir.join(OPTIMIZER_STATE),
                &OptimizerState {
                    config: adam.config,
                    steps,
                },
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = read_json(&dir.join(INDEX_FILE))?;
        let config: TrainConfig = read_json(&dir.join(CONFIG_FILE))?;
        let mut model = Model::build(&index.model, index.variant, index.seed)?;
        if index.params.len() != model.store.len() {
            return Err(Error::Format {
                path: dir.join(INDEX_FILE),
                message: format!(
                    "checkpoint lists {} parameters, the architecture has {}",
                    index.params.len(),
                    model.store.len()
                ),
            });
        }
        for entry in &index.params {
            let id = model.store.id(&entry.name).ok_or_else(|| Error::Format {
                path: dir.join(INDEX_FILE),
                message: format!("unknown parameter {}", entry.name),
            })?;
            let value = read_matrix(&dir.join(&entry.file))?;
            if value.shape() != model.store.value(id).shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?} on disk, expected {:?}",
                    entry.name,
                    value.shape(),
                    model.store.value(id).shape()
                )));
            }
            model.store.set(id, value);
        }
        Ok(Self {
            model,
            config,
            step: index.step,
            dataset_digest: index.dataset_digest,
        })
    }

    /// Optimizer moments saved beside the parameters, for `self.model`.
    pub fn load_optimizer(&self, dir: &Path) -> Result<Adam> {
        let opt_dir = dir.join(OPTIMIZER_DIR);
        let state: OptimizerState = read_json(&opt_dir.join(OPTIMIZER_STATE))?;
        let mut adam = Adam::new(state.config, &self.model.store);
        for (name, step) in state.steps {
            let id = self.model.store.id(&name).ok_or_else(|| Error::Format {
                path: opt_dir.join(OPTIMIZER_STATE),
                message: format!("unknown parameter {name}"),
            })?;
            let m = read_matrix(&opt_dir.join(format!("{name}.m.psdn")))?;
            let v = read_matrix(&opt_dir.join(format!("{name}.v.psdn")))?;
            adam.set_moments(id, Moments { step, m, v });
        }
        Ok(adam)
    }
}
