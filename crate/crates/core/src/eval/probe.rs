//! Small fixed-budget sequence classifiers used as probes and as the
//! accentedness reference.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Adam, AdamConfig, Conv1d, Graph, Linear, ParamStore, Scope, Var};
use crate::seed::rng_for;

/// Minimum examples per class for a probe to be trained.
pub const MIN_PER_CLASS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub channels: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    /// Per-utterance mean and variance normalization of each input channel.
    pub cmvn: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 16,
            holdout_fraction: 0.2,
            cmvn: false,
            seed: 0,
        }
    }
}

/// Subtracts each channel's mean over time and divides by its standard deviation.
pub fn cmvn(x: &Matrix) -> Matrix {
    let (t, c) = x.shape();
    let mut out = x.clone();
    for j in 0..c {
        let mean = (0..t).map(|r| x.get(r, j)).sum::<f64>() / t as f64;
        let var = (0..t).map(|r| (x.get(r, j) - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for r in 0..t {
            out.set(r, j, (x.get(r, j) - mean) * inv);
        }
    }
    out
}

/// Two kernel-3 convolutions with ReLU, temporal mean pool and a linear head.
#[derive(Clone, Debug)]
pub struct SeqProbe {
    store: ParamStore,
    conv1: Conv1d,
    conv2: Conv1d,
    head: Linear,
    cmvn: bool,
    classes: usize,
}

impl SeqProbe {
    pub fn new(input: usize, classes: usize, cfg: &ProbeConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng_for(&[cfg.seed, 0x9B0E]);
        let mut s = Scope::new(&mut store, &mut rng, "probe");
        let conv1 = Conv1d::new(&mut s.sub("conv1"), input, cfg.channels, 3, 1, 1);
        let conv2 = Conv1d::new(&mut s.sub("conv2"), cfg.channels, cfg.channels, 3, 1, 1);
        let head = Linear::new(&mut s.sub("head"), cfg.channels, classes);
        Self {
            store,
            conv1,
            conv2,
            head,
            cmvn: cfg.cmvn,
            classes,
        }
    }

    fn logits(&self, g: &mut Graph, x: &Matrix) -> Var {
        let input = if self.cmvn { cmvn(x) } else { x.clone() };
        let x = g.constant(input);
        let h = self.conv1.forward(g, &self.store, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, &self.store, h);
        let h = g.relu(h);
        let pooled = g.mean_rows(h);
        self.head.forward(g, &self.store, pooled)
    }

    pub fn predict(&self, x: &Matrix) -> usize {
        let mut g = Graph::inference();
        let l = self.logits(&mut g, x);
        let row = g.value(l).row(0);
        (0..self.classes)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn accuracy(&self, xs: &[&Matrix], labels: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(labels).filter(|(x, &l)| self.predict(x) == l).count();
        hits as f64 / xs.len() as f64
    }

    fn fit(&mut self, xs: &[&Matrix], labels: &[usize], cfg: &ProbeConfig) -> Result<()> {
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
            &self.store,
        );
        let mut rng = rng_for(&[cfg.seed, 0x9B0F]);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut pos = order.len();
        for step in 0..cfg.steps {
            let mut g = Graph::training();
            let mut logits = Vec::with_capacity(cfg.batch_size);
            let mut batch_labels = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size.min(xs.len()) {
                if pos == order.len() {
                    order.shuffle(&mut rng);
                    pos = 0;
                }
                let i = order[pos];
                pos += 1;
                logits.push(self.logits(&mut g, xs[i]));
                batch_labels.push(labels[i]);
            }
            let stacked = g.concat_rows(&logits);
            let loss = g.cross_entropy(stacked, &batch_labels);
            if !g.value(loss).is_finite() {
                return Err(Error::NonFinite(format!("probe loss at step {step}")));
            }
            let grads = g.backward(loss);
            adam.step(&mut self.store, &g.param_grads(&grads));
        }
        Ok(())
    }
}

/// Indices split per class into a training part and a held-out part.
pub fn stratified_split(labels: &[usize], classes: usize, holdout: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = rng_for(&[seed, 0x5B117]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < MIN_PER_CLASS {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} examples, at least {MIN_PER_CLASS} are needed",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * holdout).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub probe: SeqProbe,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub heldout: Vec<usize>,
}

/// Trains a fresh probe on a stratified 1 − holdout slice and scores the rest.
pub fn train_probe(features: &[Matrix], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    if features.len() != labels.len() {
        return Err(Error::Contract("one label per feature sequence".into()));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Contract("probe label out of range".into()));
    }
    let input = features.first().map_or(0, Matrix::cols);
    if features.iter().any(|f| f.cols() != input || f.rows() == 0) {
        return Err(Error::Shape("probe features must share a width and be non-empty".into()));
    }
    let (train, test) = stratified_split(labels, classes, cfg.holdout_fraction, cfg.seed)?;
    let pick = |idx: &[usize]| -> (Vec<&Matrix>, Vec<usize>) {
        (idx.iter().map(|&i| &features[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let mut probe = SeqProbe::new(input, classes, cfg);
    probe.fit(&xtr, &ytr, cfg)?;
    Ok(ProbeOutcome {
        train_accuracy: probe.accuracy(&xtr, &ytr),
        heldout_accuracy: probe.accuracy(&xte, &yte),
        probe,
        heldout: test,
    })
}

/// Labels permuted with a fixed seed, for chance calibration.
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut rng_for(&[seed, 0x5A0F]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use rand::SeedableRng;

    fn dataset(n_per: usize, classes: usize, signal: f64) -> (Vec<Matrix>, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per {
                let mut x = normal(&mut rng, 12, 4, 1.0);
                for r in 0..12 {
                    let v = x.get(r, c % 4) + signal;
                    x.set(r, c % 4, v);
                }
                xs.push(x);
                ys.push(c);
            }
        }
        (xs, ys)
    }

    fn quick() -> ProbeConfig {
        ProbeConfig {
            channels: 8,
            steps: 300,
            learning_rate: 1e-2,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn separable_classes_are_learned() {
        let (xs, ys) = dataset(20, 3, 2.0);
        let out = train_probe(&xs, &ys, 3, &quick()).unwrap();
        assert!(out.heldout_accuracy > 0.9, "{}", out.heldout_accuracy);
    }

    #[test]
    fn too_few_examples_is_an_error() {
        let (xs, ys) = dataset(9, 2, 1.0);
        assert!(matches!(train_probe(&xs, &ys, 2, &quick()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (train, test) = stratified_split(&labels, 4, 0.2, 3).unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(train.len() + test.len(), 100);
        assert!(test.iter().all(|i| !train.contains(i)));
        for c in 0..4 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
    }

    #[test]
    fn cmvn_removes_channel_affine_maps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = normal(&mut rng, 30, 5, 1.0);
        let y = Matrix::from_fn(30, 5, |r, c| (1.0 + c as f64) * x.get(r, c) - 0.3 * c as f64);
        assert!(cmvn(&x).max_abs_diff(&cmvn(&y)) < 1e-6);
    }
}
