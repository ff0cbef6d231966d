//! Training configuration, the optimization step and the training loop.

mod batches;
mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::content::content_loss;
use crate::data::{AccentLabelSet, Dataset, Utterance};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{apply_stat_updates, Adam, AdamConfig, Graph, Mode, Var};
use crate::psdn::{accent_loss, LossBreakdown, Model, ModelConfig, Streams, Variant};
use crate::seed::{derive_seed, rng_for};
use crate::timbre::{augment_speaker, AugmentedUtterance, OracleAugmenter, TimbreAugmenter};

pub use batches::{make_batches, BatchIter};
pub use checkpoint::{Checkpoint, CURVE_FILE};

const TAG_BATCHES: u64 = 0xB0;
const TAG_AUGMENT: u64 = 0xA6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmenterKind {
    Oracle,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub augmentation: bool,
    pub augmenter: AugmenterKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub grl_lambda: f64,
    pub p_convert: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub bn_momentum: f64,
    /// Conformer and classifier width when `model` is not given.
    pub width: usize,
    /// Full architecture override; `bnf_dim` must match the data.
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Psdn,
            augmentation: true,
            augmenter: AugmenterKind::Oracle,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 5000,
            grl_lambda: crate::content::GRL_LAMBDA,
            p_convert: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            bn_momentum: 0.1,
            width: 64,
            model: None,
        }
    }
}

impl TrainConfig {
    /// Published recipe: batch 32, learning rate 0.001, 220k steps, paper widths.
    pub fn paper(bnf_dim: usize) -> Self {
        Self {
            batch_size: 32,
            steps: 220_000,
            width: 512,
            model: Some(ModelConfig::paper(bnf_dim)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return fail(format!("batch_size must be even and positive, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.grl_lambda >= 0.0) {
            return fail(format!("grl_lambda must be non-negative, got {}", self.grl_lambda));
        }
        if !(0.0..=1.0).contains(&self.p_convert) {
            return fail(format!("p_convert must lie in [0, 1], got {}", self.p_convert));
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_momentum must lie in [0, 1]".into());
        }
        if self.model.is_none() && (self.width == 0 || self.width % 4 != 0) {
            return fail(format!("width must be a positive multiple of 4, got {}", self.width));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Architecture for data with `bnf_dim` BNF channels.
    pub fn model_config(&self, bnf_dim: usize) -> Result<ModelConfig> {
        match &self.model {
            Some(m) if m.content.bnf_dim != bnf_dim => Err(Error::Config(format!(
                "model expects {} BNF channels but the data has {bnf_dim}",
                m.content.bnf_dim
            ))),
            Some(m) => Ok(m.clone()),
            None => Ok(ModelConfig::desk(bnf_dim, self.width)),
        }
    }

    pub fn uses_augmentation(&self) -> bool {
        self.augmentation && self.augmenter == AugmenterKind::Oracle && self.p_convert > 0.0
    }
}

/// Builds the model for a configuration: parameter namespaces follow the variant.
pub fn build_model(config: &TrainConfig, bnf_dim: usize) -> Result<Model> {
    config.validate()?;
    Model::build(&config.model_config(bnf_dim)?, config.variant, config.seed)
}

/// Differentiable loss of one batch, recorded in a fresh graph.
pub struct BatchLoss {
    pub graph: Graph,
    pub total: Var,
    pub parts: LossBreakdown,
}

/// Forward pass of the training objective. Content comes from the BNF, timbre
/// from `mel_aug`, auxiliary features from the raw mel; reconstruction targets
/// are `mel_aug`. Each item's reconstruction is routed by its accent.
pub fn batch_loss(
    model: &Model,
    items: &[AugmentedUtterance<'_>],
    num_other_accents: usize,
    grl_lambda: f64,
    mode: Mode,
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let store = &model.store;
    let mut g = Graph::new(mode, true);
    let mut contents = Vec::with_capacity(items.len());
    let mut logits = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for item in items {
        let bnf = g.constant(item.base.bnf.clone());
        let fc = model.content_encoder.forward(&mut g, store, bnf)?;
        logits.push(model.classifier.forward(&mut g, store, fc, grl_lambda)?);
        labels.push(AccentLabelSet::new(item.base.accent_label, num_other_accents)?);
        contents.push(fc);
    }
    let targets: Vec<Var> = items.iter().map(|it| g.constant(it.mel_aug.as_ref().clone())).collect();
    let timbres = model.timbre.forward_batch(&mut g, store, &targets)?;

    let mut target_terms = Vec::new();
    let mut aux_terms = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let (fc, ft, y) = (contents[i], timbres[i], targets[i]);
        let is_target = item.base.is_target();
        match &model.streams {
            Streams::Psdn { target, aux_encoder, aux } => {
                let mel = g.constant(item.base.mel.clone());
                let fa = aux_encoder.forward(&mut g, store, mel)?;
                let pred_aux = aux.forward(&mut g, store, fc, ft, Some(fa))?;
                let pred_target = if is_target {
                    Some(target.forward(&mut g, store, fc, ft, None)?)
                } else {
                    None
                };
                let (t, a) = accent_loss(&mut g, pred_target, pred_aux, y, is_target)?;
                target_terms.extend(t);
                aux_terms.push(a);
            }
            Streams::Baseline { dec_target, dec_other } => {
                let dec = if is_target { dec_target } else { dec_other };
                let pred = dec.forward(&mut g, store, fc, ft, None)?;
                let term = g.l1_loss(pred, y);
                if is_target {
                    target_terms.push(term);
                } else {
                    aux_terms.push(term);
                }
            }
        }
    }
    let inv = 1.0 / items.len() as f64;
    let mean_of = |g: &mut Graph, terms: &[Var]| {
        if terms.is_empty() {
            g.constant(Matrix::scalar(0.0))
        } else {
            let s = g.add_all(terms);
            g.scale(s, inv)
        }
    };
    let target_term = mean_of(&mut g, &target_terms);
    let aux_term = mean_of(&mut g, &aux_terms);
    let content = content_loss(&mut g, &logits, &labels);
    let total = g.add_all(&[content, target_term, aux_term]);
    let value = |v: Var| g.value(v).get(0, 0);
    let parts = LossBreakdown::new(value(content), value(target_term), value(aux_term));
    Ok(BatchLoss { graph: g, total, parts })
}

/// Everything the loop needs besides the model and optimizer.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub num_other_accents: usize,
    pub augmenter: Option<&'a dyn TimbreAugmenter>,
    /// Speakers an utterance may be converted to.
    pub candidates: &'a [usize],
}

/// Augments a batch; item `slot` of step `step` always uses the same random stream.
pub fn augment_batch<'a>(
    ctx: &StepContext<'_>,
    utterances: &[&'a Utterance],
    step: usize,
) -> Result<Vec<AugmentedUtterance<'a>>> {
    let cfg = ctx.config;
    match ctx.augmenter {
        Some(aug) if cfg.uses_augmentation() => utterances
            .par_iter()
            .enumerate()
            .map(|(slot, u)| {
                let mut rng = rng_for(&[cfg.seed, TAG_AUGMENT, step as u64, slot as u64]);
                augment_speaker(u, cfg.p_convert, &mut rng, aug, ctx.candidates)
            })
            .collect(),
        _ => Ok(utterances.iter().map(|u| AugmentedUtterance::unchanged(u)).collect()),
    }
}

/// One optimization step on an augmented batch.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    items: &[AugmentedUtterance<'_>],
    ctx: &StepContext<'_>,
) -> Result<LossBreakdown> {
    let mut loss = batch_loss(model, items, ctx.num_other_accents, ctx.config.grl_lambda, Mode::Train)?;
    let ids = || items.iter().map(|i| i.base.id.as_str()).collect::<Vec<_>>().join(", ");
    if !loss.parts.is_finite() {
        return Err(Error::NonFinite(format!("loss {:?} on batch [{}]", loss.parts, ids())));
    }
    let grads = loss.graph.backward(loss.total);
    let param_grads = loss.graph.param_grads(&grads);
    if let Some((id, _)) = param_grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} on batch [{}]",
            model.store.name(*id),
            ids()
        )));
    }
    let updates = loss.graph.take_stat_updates();
    optimizer.step(&mut model.store, &param_grads);
    apply_stat_updates(&mut model.store, &updates, ctx.config.bn_momentum);
    Ok(loss.parts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    #[serde(flatten)]
    pub parts: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    pub curve: Vec<CurvePoint>,
}

/// Runs the full loop. With an output directory, a checkpoint is written every
/// `checkpoint_every` steps and at completion, and the curve is appended to
/// `curve.jsonl` as it grows.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = build_model(config, dataset.bnf_dim())?;
    let mut optimizer = Adam::new(config.adam(), &model.store);
    let mut batches = make_batches(&dataset.manifest, config.batch_size, derive_seed(&[config.seed, TAG_BATCHES]))?;

    let oracle;
    let mut candidates = Vec::new();
    let augmenter: Option<&dyn TimbreAugmenter> = if config.uses_augmentation() {
        let generator = dataset.generator().map_err(|_| {
            Error::Config("augmentation with the oracle augmenter needs a synthetic dataset".into())
        })?;
        candidates = generator.training_speakers().map(|s| s.index).collect();
        oracle = OracleAugmenter { generator };
        Some(&oracle)
    } else {
        None
    };
    let ctx = StepContext {
        config,
        num_other_accents: dataset.num_other_accents(),
        augmenter,
        candidates: &candidates,
    };

    let mut curve_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(CURVE_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    log::info!(
        "training {} for {} steps (batch {}, augmentation {})",
        config.variant.name(),
        config.steps,
        config.batch_size,
        config.uses_augmentation()
    );
    let mut curve = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch = batches.next().expect("batch iterator is endless");
        let utts: Vec<&Utterance> = batch.iter().map(|&i| &dataset.utterances[i]).collect();
        let items = augment_batch(&ctx, &utts, step)?;
        let parts = train_step(&mut model, &mut optimizer, &items, &ctx)?;
        let point = CurvePoint { step, parts };
        if let Some((file, path)) = curve_file.as_mut() {
            let line = serde_json::to_string(&point).map_err(|e| Error::json("curve point", e))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if step % 100 == 0 || step == 1 {
            log::info!(
                "step {step}: total {:.4} content {:.4} target {:.4} aux {:.4}",
                parts.total,
                parts.content_loss,
                parts.accent_target_term,
                parts.accent_aux_term
            );
        }
        curve.push(point);
        if let Some(dir) = out_dir {
            if step % config.checkpoint_every == 0 || step == config.steps {
                Checkpoint::save(dir, &model, Some(&optimizer), config, step, dataset.digest())?;
            }
        }
    }
    Ok(TrainOutcome { model, optimizer, curve })
}
