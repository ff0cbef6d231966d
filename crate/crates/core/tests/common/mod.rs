//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use psdn_core::{Split, Utterance};
use psdn_core::nn::Mode;
use psdn_core::psdn::{Model, ModelConfig, Variant};
use psdn_core::seed::rng_for;
use psdn_core::synthgen::{Generator, GeneratorConfig};
use psdn_core::timbre::AugmentedUtterance;
use psdn_core::training::batch_loss;
use rand::Rng;

pub const TINY_BNF: usize = 12;

pub fn tiny_generator() -> Generator {
    Generator::new(&GeneratorConfig {
        bnf_dim: TINY_BNF,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

/// An utterance of `speaker` cut to its first `frames` frames.
pub fn short_utterance(g: &Generator, speaker: usize, seed: u64, frames: usize) -> Utterance {
    let accent = g.speaker(speaker).unwrap().accent;
    let mut f = g.sample_factors(accent, speaker, seed).unwrap();
    f.content_seq.truncate(frames);
    g.utterance_from_factors(format!("short-{speaker}-{seed}"), f, Split::Train).unwrap()
}

/// Total loss of a batch as a plain function of the model parameters.
pub fn loss_value(model: &Model, items: &[AugmentedUtterance<'_>], lambda: f64) -> f64 {
    batch_loss(model, items, 4, lambda, Mode::Train).unwrap().parts.total
}

/// Largest relative error between backprop and central differences over
/// `count` randomly chosen trainable scalars. The reversal layer runs with
/// λ = −1, which makes it an identity in both directions so that backprop
/// returns the true gradient of the total loss.
pub fn full_network_gradient_error(variant: Variant, frames: usize, count: usize, h: f64, seed: u64) -> f64 {
    let g = tiny_generator();
    let utts = [short_utterance(&g, 0, seed, frames), short_utterance(&g, 9, seed + 1, frames)];
    let items: Vec<_> = utts.iter().map(AugmentedUtterance::unchanged).collect();
    let mut model = Model::build(&ModelConfig::tiny(TINY_BNF), variant, seed).unwrap();
    let loss = batch_loss(&model, &items, 4, -1.0, Mode::Train).unwrap();
    let grads = loss.graph.backward(loss.total);
    let analytic = loss.graph.param_grads(&grads);

    let trainable: Vec<_> = model.store.ids().filter(|&id| model.store.is_trainable(id)).collect();
    let mut rng = rng_for(&[seed, 0xFD]);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let id = trainable[rng.random_range(0..trainable.len())];
        let n = model.store.value(id).len();
        let i = rng.random_range(0..n);
        let a = analytic.iter().find(|(p, _)| *p == id).map_or(0.0, |(_, m)| m.data()[i]);
        let orig = model.store.value(id).data()[i];
        model.store.value_mut(id).data_mut()[i] = orig + h;
        let up = loss_value(&model, &items, -1.0);
        model.store.value_mut(id).data_mut()[i] = orig - h;
        let down = loss_value(&model, &items, -1.0);
        model.store.value_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// The default synthetic dataset, written to a fresh temporary directory.
pub fn default_dataset() -> (tempfile::TempDir, psdn_core::Dataset) {
    use psdn_core::synthgen::{generate_dataset, MANIFEST_FILE};
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    generate_dataset(&cfg, &cfg.counts, dir.path()).unwrap();
    let ds = psdn_core::Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    (dir, ds)
}

/// Fresh target-accent utterances that are not part of any generated split.
pub fn fresh_target_utterances(g: &Generator, n: usize) -> Vec<Utterance> {
    (0..n as u64).map(|i| g.sample_utterance(0, 0, 900_000 + i).unwrap()).collect()
}

/// A class-balanced labelled BNF set drawn straight from the generator,
/// cycling through each accent's training speakers.
pub fn balanced_bnf(g: &Generator, per_class: usize) -> (Vec<psdn_core::Matrix>, Vec<usize>) {
    let (mut features, mut labels) = (Vec::new(), Vec::new());
    for accent in 0..=g.config().num_other_accents {
        let speakers: Vec<usize> = g.training_speakers().filter(|s| s.accent == accent).map(|s| s.index).collect();
        for i in 0..per_class {
            let utt = g.sample_utterance(accent, speakers[i % speakers.len()], 800_000 + i as u64).unwrap();
            features.push(utt.bnf);
            labels.push(accent);
        }
    }
    (features, labels)
}
