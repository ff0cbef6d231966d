//! Automated surrogates for listening tests: accent probes, oracle conversion
//! fidelity, accentedness scoring and timbre preservation.

pub mod probe;
mod report;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, Utterance};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::psdn::Model;
use crate::seed::rng_for;
use crate::synthgen::Generator;

pub use probe::{cmvn, shuffled_labels, stratified_split, train_probe, ProbeConfig, ProbeOutcome, SeqProbe, MIN_PER_CLASS};
pub use report::{read_report, write_report, EvalReport, ProbeReport, Quantiles};

/// Held-out accuracy the accentedness reference classifier must reach.
pub const REFERENCE_MIN_ACCURACY: f64 = 0.95;
/// Channels whose reference rendering varies less than this are excluded from the gain fit.
pub const DEGENERATE_VARIANCE: f64 = 1e-8;

const TAG_BOOTSTRAP: u64 = 0xB007;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub seed: u64,
    pub probe: ProbeConfig,
    pub reference: ProbeConfig,
    pub bootstrap_resamples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            probe: ProbeConfig::default(),
            reference: ProbeConfig {
                cmvn: true,
                ..ProbeConfig::default()
            },
            bootstrap_resamples: 1000,
        }
    }
}

impl EvalOptions {
    fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed,
            ..self.probe.clone()
        }
    }

    fn reference_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed,
            ..self.reference.clone()
        }
    }
}

/// `1 / (K + 1)`.
pub fn chance_level(num_other_accents: usize) -> f64 {
    1.0 / (num_other_accents + 1) as f64
}

fn train_split(dataset: &Dataset) -> Vec<&Utterance> {
    dataset.indices(Split::Train).into_iter().map(|i| &dataset.utterances[i]).collect()
}

/// Other-accent utterances of the test split, i.e. unseen speakers.
pub fn test_utterances(dataset: &Dataset) -> Vec<&Utterance> {
    dataset
        .indices(Split::Test)
        .into_iter()
        .map(|i| &dataset.utterances[i])
        .filter(|u| !u.is_target())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub chance: f64,
}

/// Trains a probe on arbitrary per-utterance features of the train split.
pub fn probe_features(features: &[Matrix], labels: &[usize], num_other: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let out = train_probe(features, labels, num_other + 1, cfg)?;
    Ok(ProbeResult {
        accuracy: out.heldout_accuracy,
        train_accuracy: out.train_accuracy,
        chance: chance_level(num_other),
    })
}

/// (K+1)-way accent probe on the frozen content representation.
pub fn probe_accent(model: &Model, dataset: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let utts = train_split(dataset);
    let features = utts
        .par_iter()
        .map(|u| model.encode_content(&u.bnf))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = utts.iter().map(|u| u.accent_label).collect();
    probe_features(&features, &labels, dataset.num_other_accents(), cfg)
}

/// The same probe on the BNF itself, measuring the leakage the encoder starts from.
pub fn probe_raw_bnf(dataset: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let utts = train_split(dataset);
    let features: Vec<Matrix> = utts.iter().map(|u| u.bnf.clone()).collect();
    let labels: Vec<usize> = utts.iter().map(|u| u.accent_label).collect();
    probe_features(&features, &labels, dataset.num_other_accents(), cfg)
}

/// (K+1)-way accent classifier on raw mel, used to score converted outputs.
#[derive(Clone, Debug)]
pub struct ReferenceClassifier {
    probe: SeqProbe,
    pub heldout_accuracy: f64,
}

impl ReferenceClassifier {
    pub fn train(dataset: &Dataset, cfg: &ProbeConfig) -> Result<Self> {
        let utts = train_split(dataset);
        let mels: Vec<Matrix> = utts.iter().map(|u| u.mel.clone()).collect();
        let labels: Vec<usize> = utts.iter().map(|u| u.accent_label).collect();
        let out = train_probe(&mels, &labels, dataset.num_other_accents() + 1, cfg)?;
        Ok(Self {
            probe: out.probe,
            heldout_accuracy: out.heldout_accuracy,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heldout_accuracy < REFERENCE_MIN_ACCURACY {
            return Err(Error::SurrogateInvalid(format!(
                "accent reference classifier reached {:.3} held-out accuracy, {REFERENCE_MIN_ACCURACY} required",
                self.heldout_accuracy
            )));
        }
        Ok(())
    }

    pub fn predict(&self, mel: &Matrix) -> usize {
        self.probe.predict(mel)
    }
}

/// Fraction of `mels` the reference classifier assigns to the target accent.
pub fn accentedness_rate(mels: &[Matrix], reference: &ReferenceClassifier) -> f64 {
    if mels.is_empty() {
        return 0.0;
    }
    let hits: usize = mels.par_iter().map(|m| usize::from(reference.predict(m) == 0)).sum();
    hits as f64 / mels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fidelity {
    pub l1_to_oracle_target: f64,
    pub l1_to_source: f64,
    pub win_rate: f64,
    pub win_rate_ci: [f64; 2],
    pub wins: Vec<bool>,
}

/// Scores converted mels against the oracle target-accent rendering and the
/// denoised source. `converted[i]` belongs to `utts[i]`.
pub fn conversion_fidelity(
    converted: &[Matrix],
    utts: &[&Utterance],
    generator: &Generator,
    resamples: usize,
    seed: u64,
) -> Result<Fidelity> {
    if converted.len() != utts.len() || utts.is_empty() {
        return Err(Error::Contract("one converted mel per utterance, at least one utterance".into()));
    }
    let pairs = converted
        .par_iter()
        .zip(utts.par_iter())
        .map(|(y, u)| {
            let oracle = generator.oracle_convert(u, 0)?;
            let source = generator.denoised(u)?;
            if y.shape() != oracle.shape() {
                return Err(Error::Shape(format!("{}: converted shape {:?}", u.id, y.shape())));
            }
            Ok((y.mean_abs_diff(&oracle), y.mean_abs_diff(&source)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let wins: Vec<bool> = pairs.iter().map(|(o, s)| o < s).collect();
    Ok(Fidelity {
        l1_to_oracle_target: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        l1_to_source: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        win_rate: rate(&wins),
        win_rate_ci: bootstrap_ci(&wins, resamples, seed),
        wins,
    })
}

fn rate(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&w| w).count() as f64 / flags.len().max(1) as f64
}

/// Percentile bootstrap 95% interval of a win rate.
pub fn bootstrap_ci(wins: &[bool], resamples: usize, seed: u64) -> [f64; 2] {
    if wins.is_empty() || resamples == 0 {
        let r = rate(wins);
        return [r, r];
    }
    let mut rng = rng_for(&[seed, TAG_BOOTSTRAP]);
    let mut rates: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits = (0..wins.len()).filter(|_| wins[rng.random_range(0..wins.len())]).count();
            hits as f64 / wins.len() as f64
        })
        .collect();
    rates.sort_by(f64::total_cmp);
    [quantile(&rates, 0.025), quantile(&rates, 0.975)]
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainFit {
    /// Relative L2 gap between the recovered and the true per-channel gain.
    pub error: f64,
    pub gain: Vec<f64>,
    pub degenerate_channels: usize,
}

/// Regresses each channel of `converted` on the timbre-free target-accent
/// rendering of the same content and compares the recovered gain to the
/// source speaker's gain.
pub fn timbre_gain_fit(converted: &Matrix, utt: &Utterance, generator: &Generator) -> Result<GainFit> {
    let f = utt.factors.as_ref().ok_or_else(|| Error::MissingFactors(utt.id.clone()))?;
    let reference = generator.render(&f.content_seq, 0, None, None)?;
    if converted.shape() != reference.shape() {
        return Err(Error::Shape(format!("{}: converted shape {:?}", utt.id, converted.shape())));
    }
    let (t, c) = reference.shape();
    let mut gain = vec![f64::NAN; c];
    let mut degenerate = 0;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..c {
        let xm = (0..t).map(|r| reference.get(r, k)).sum::<f64>() / t as f64;
        let ym = (0..t).map(|r| converted.get(r, k)).sum::<f64>() / t as f64;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for r in 0..t {
            let dx = reference.get(r, k) - xm;
            sxx += dx * dx;
            sxy += dx * (converted.get(r, k) - ym);
        }
        if sxx / t as f64 <= DEGENERATE_VARIANCE {
            degenerate += 1;
            continue;
        }
        gain[k] = sxy / sxx;
        num += (gain[k] - f.timbre.gain[k]).powi(2);
        den += f.timbre.gain[k].powi(2);
    }
    if degenerate == c {
        return Err(Error::InsufficientData(format!("{}: every channel is constant", utt.id)));
    }
    Ok(GainFit {
        error: (num / den).sqrt(),
        gain,
        degenerate_channels: degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimbrePreservation {
    pub mean_error: f64,
    pub quantiles: Quantiles,
    pub degenerate_channels: usize,
    pub per_utterance: Vec<f64>,
}

pub fn timbre_preservation(converted: &[Matrix], utts: &[&Utterance], generator: &Generator) -> Result<TimbrePreservation> {
    if converted.len() != utts.len() || utts.is_empty() {
        return Err(Error::Contract("one converted mel per utterance, at least one utterance".into()));
    }
    let fits = converted
        .par_iter()
        .zip(utts.par_iter())
        .map(|(y, u)| timbre_gain_fit(y, u, generator))
        .collect::<Result<Vec<_>>>()?;
    let per_utterance: Vec<f64> = fits.iter().map(|f| f.error).collect();
    let mut sorted = per_utterance.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimbrePreservation {
        mean_error: per_utterance.iter().sum::<f64>() / per_utterance.len() as f64,
        quantiles: Quantiles::of_sorted(&sorted),
        degenerate_channels: fits.iter().map(|f| f.degenerate_channels).sum(),
        per_utterance,
    })
}

/// Mean L1 of target-stream reconstructions of target-accent utterances,
/// a stand-in for naturalness.
pub fn target_reconstruction_l1(model: &Model, dataset: &Dataset) -> Result<f64> {
    let pick = |split| -> Vec<&Utterance> {
        dataset
            .indices(split)
            .into_iter()
            .map(|i| &dataset.utterances[i])
            .filter(|u| u.is_target())
            .collect()
    };
    let mut utts = pick(Split::Valid);
    if utts.is_empty() {
        utts = pick(Split::Train);
    }
    if utts.is_empty() {
        return Err(Error::InsufficientData("no target-accent utterances".into()));
    }
    let l1 = utts
        .par_iter()
        .map(|u| Ok(model.convert(u)?.mean_abs_diff(&u.mel)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(l1.iter().sum::<f64>() / l1.len() as f64)
}

/// Converts every held-out other-accent test utterance.
pub fn convert_test_set(model: &Model, utts: &[&Utterance]) -> Result<Vec<Matrix>> {
    utts.par_iter().map(|u| model.convert(u)).collect()
}

/// Runs every surrogate for one model. `reference` is trained once per
/// dataset and shared across the compared models.
pub fn evaluate(
    model: &Model,
    checkpoint_step: usize,
    dataset: &Dataset,
    reference: &ReferenceClassifier,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    reference.validate()?;
    let generator = dataset.generator()?;
    let utts = test_utterances(dataset);
    if utts.is_empty() {
        return Err(Error::InsufficientData("test split has no other-accent utterances".into()));
    }
    let converted = convert_test_set(model, &utts)?;
    let fidelity = conversion_fidelity(&converted, &utts, generator, opts.bootstrap_resamples, opts.seed)?;
    let timbre = timbre_preservation(&converted, &utts, generator)?;
    let probe = probe_accent(model, dataset, &opts.probe_config())?;
    Ok(EvalReport {
        probe_accent_accuracy_on_content: probe.accuracy,
        probe_chance_level: probe.chance,
        accentedness_rate: accentedness_rate(&converted, reference),
        l1_to_oracle_target: fidelity.l1_to_oracle_target,
        l1_to_source: fidelity.l1_to_source,
        conversion_win_rate: fidelity.win_rate,
        timbre_gain_error: timbre.mean_error,
        variant: model.variant.name().to_string(),
        dataset_digest: dataset.digest().to_string(),
        checkpoint_step,
        surrogate: true,
        conversion_win_rate_ci: fidelity.win_rate_ci,
        timbre_gain_error_quantiles: timbre.quantiles,
        timbre_degenerate_channels: timbre.degenerate_channels,
        target_reconstruction_l1: target_reconstruction_l1(model, dataset)?,
        reference_classifier_accuracy: reference.heldout_accuracy,
        test_utterances: utts.len(),
    })
}

/// Trains the reference classifier for `dataset` with the options' budget.
pub fn reference_classifier(dataset: &Dataset, opts: &EvalOptions) -> Result<ReferenceClassifier> {
    ReferenceClassifier::train(dataset, &opts.reference_config())
}

/// Probe-only report for a checkpoint.
pub fn probe_report(model: &Model, checkpoint_step: usize, dataset: &Dataset, opts: &EvalOptions) -> Result<ProbeReport> {
    let probe = probe_accent(model, dataset, &opts.probe_config())?;
    Ok(ProbeReport {
        probe_accent_accuracy_on_content: probe.accuracy,
        probe_chance_level: probe.chance,
        probe_train_accuracy: probe.train_accuracy,
        variant: model.variant.name().to_string(),
        dataset_digest: dataset.digest().to_string(),
        checkpoint_step,
    })
}
