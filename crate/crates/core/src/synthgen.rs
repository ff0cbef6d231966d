//! Synthetic factorized speech features with a ground-truth conversion oracle.
//!
//! Each utterance is rendered from known latents: a piecewise-constant symbol
//! sequence (content), an accent id and a speaker timbre. The generative rules
//! are
//!
//! ```text
//! mel[t] = gain ⊙ (A_a · e(c[t]) + b_a[t]) + bias + σ·η[t]
//! bnf[t] = P · (e(c[t]) + α·(A_a − I)·e(c[t]))
//! b_a[t] = 0.3 · sin(2π t / P_a + φ_a) · u_a
//! ```
//!
//! Accent is a per-frame linear mixing plus a periodic trajectory (time
//! varying), while timbre is a global per-channel affine map. The bottleneck
//! features carry content plus an `α`-scaled accent leak and no timbre.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    write_manifest, write_matrix, DatasetManifest, ManifestEntry, Split, Utterance, MEL_DIM,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{derive_seed, rng_for};

pub const GENERATOR_RECORD_FILE: &str = "generator_config.json";
pub const FACTORS_FILE: &str = "factors.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const PROSODY_AMPLITUDE: f64 = 0.3;
const MIN_SINGULAR_VALUE: f64 = 0.1;

const TAG_SYMBOLS: u64 = 1;
const TAG_MIXING: u64 = 2;
const TAG_PROSODY: u64 = 3;
const TAG_PROJECTION: u64 = 4;
const TAG_SPEAKER: u64 = 5;
const TAG_CONTENT: u64 = 6;
const TAG_NOISE: u64 = 7;
const TAG_SWAP: u64 = 8;
const TAG_DATASET: u64 = 9;

/// Utterance counts per split and accent group. Other-accent utterances are
/// spread round-robin over the other-accent speakers of the split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetCounts {
    pub train_target: usize,
    pub train_other: usize,
    pub valid_target: usize,
    pub valid_other: usize,
    /// Drawn only from held-out speakers.
    pub test_other: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train_target: 64,
            train_other: 640,
            valid_target: 0,
            valid_other: 0,
            test_other: 32,
        }
    }
}

impl DatasetCounts {
    pub fn total(&self) -> usize {
        self.train_target + self.train_other + self.valid_target + self.valid_other + self.test_other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub num_other_accents: usize,
    /// Training speakers of the target accent.
    pub target_speakers: usize,
    /// Training speakers of each other accent.
    pub speakers_per_other_accent: usize,
    /// Test-only speakers of each other accent.
    pub heldout_speakers_per_other_accent: usize,
    pub frames_per_symbol: [usize; 2],
    pub utterance_frames: [usize; 2],
    pub mel_dim: usize,
    pub bnf_dim: usize,
    pub accent_strength: f64,
    pub bnf_accent_leakage: f64,
    pub noise_sigma: f64,
    pub master_seed: u64,
    /// Force `A_0 = I` and `b_0 ≡ 0` for the target accent.
    pub identity_target_accent: bool,
    pub counts: DatasetCounts,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            num_other_accents: 4,
            target_speakers: 1,
            speakers_per_other_accent: 8,
            heldout_speakers_per_other_accent: 1,
            frames_per_symbol: [4, 8],
            utterance_frames: [40, 120],
            mel_dim: MEL_DIM,
            bnf_dim: 256,
            accent_strength: 0.15,
            bnf_accent_leakage: 0.5,
            noise_sigma: 0.01,
            master_seed: 7,
            identity_target_accent: false,
            counts: DatasetCounts::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.num_other_accents < 1 {
            return fail("num_other_accents must be >= 1".into());
        }
        if self.target_speakers < 1 || self.speakers_per_other_accent < 1 {
            return fail("every accent needs at least one training speaker".into());
        }
        if self.mel_dim != MEL_DIM {
            return fail(format!("mel_dim must be {MEL_DIM}, got {}", self.mel_dim));
        }
        if self.bnf_dim < 1 {
            return fail("bnf_dim must be positive".into());
        }
        if !(self.accent_strength > 0.0) {
            return fail(format!(
                "accent_strength must be > 0, got {}",
                self.accent_strength
            ));
        }
        if !(self.bnf_accent_leakage >= 0.0) {
            return fail("bnf_accent_leakage must be >= 0".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be >= 0".into());
        }
        for (name, [lo, hi]) in [
            ("frames_per_symbol", self.frames_per_symbol),
            ("utterance_frames", self.utterance_frames),
        ] {
            if lo == 0 || lo > hi {
                return fail(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.utterance_frames[1] < self.frames_per_symbol[0] {
            return fail("utterance_frames cannot hold a single symbol run".into());
        }
        if self.counts.test_other > 0 && self.heldout_speakers_per_other_accent == 0 {
            return fail("test utterances requested but there are no held-out speakers".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Generator configuration as stored beside a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub config: GeneratorConfig,
    pub digest: String,
}

impl GeneratorRecord {
    pub fn new(config: GeneratorConfig) -> Self {
        let digest = config.digest();
        Self { config, digest }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if record.config.digest() != record.digest {
            return Err(Error::format(path, "generator config digest mismatch"));
        }
        Ok(record)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("generator record", e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Per-speaker global affine timbre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timbre {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Timbre {
    pub fn identity() -> Self {
        Self {
            gain: vec![1.0; MEL_DIM],
            bias: vec![0.0; MEL_DIM],
        }
    }
}

/// Ground-truth latents of one synthetic utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFactors {
    /// Symbols in `1..=V`, one per frame.
    pub content_seq: Vec<usize>,
    pub accent_id: usize,
    pub speaker_index: usize,
    pub timbre: Timbre,
    pub utt_seed: u64,
    pub noise_seed: u64,
}

impl SynthFactors {
    pub fn frames(&self) -> usize {
        self.content_seq.len()
    }
}

/// Sidecar line that lets a loader rebuild [`SynthFactors`] for a manifest entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorsRecord {
    pub id: String,
    pub accent_id: usize,
    pub speaker_index: usize,
    pub utt_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccentParams {
    /// `A_a = I + ε·M_a`, `[80 × 80]`.
    pub mixing: Matrix,
    pub period: f64,
    pub phase: f64,
    /// Unit-norm direction of the periodic trajectory.
    pub direction: Vec<f64>,
}

impl AccentParams {
    /// Scalar amplitude of `b_a[t]` along `direction`.
    pub fn prosody(&self, t: usize) -> f64 {
        PROSODY_AMPLITUDE * (2.0 * PI * t as f64 / self.period + self.phase).sin()
    }

    pub fn trajectory(&self, t: usize) -> Vec<f64> {
        let s = self.prosody(t);
        self.direction.iter().map(|u| s * u).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerInfo {
    pub index: usize,
    pub accent: usize,
    pub heldout: bool,
    pub timbre: Timbre,
}

impl SpeakerInfo {
    pub fn name(&self) -> String {
        speaker_name(self.index)
    }
}

pub fn speaker_name(index: usize) -> String {
    format!("spk{index:03}")
}

/// All fixed random structure of a generator configuration, materialized once.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    symbols: Matrix,
    accents: Vec<AccentParams>,
    projection: Matrix,
    speakers: Vec<SpeakerInfo>,
    /// Per accent, row `s-1` is `A_a · e(s)`.
    mixed: Vec<Matrix>,
    /// Per accent, row `s-1` is the BNF frame of symbol `s`.
    bnf_table: Vec<Matrix>,
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn min_singular_value(m: &Matrix) -> f64 {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    dm.singular_values().min()
}

impl Generator {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let d = MEL_DIM;
        let seed = config.master_seed;
        let v = config.vocab_size;
        let k = config.num_other_accents;

        let mut rng = rng_for(&[seed, TAG_SYMBOLS]);
        let symbols = Matrix::from_vec(v, d, normal_vec(&mut rng, v * d, 1.0));

        let mut accents = Vec::with_capacity(k + 1);
        for a in 0..=k {
            if a == 0 && config.identity_target_accent {
                accents.push(AccentParams {
                    mixing: Matrix::identity(d),
                    period: 8.0,
                    phase: 0.0,
                    direction: {
                        let mut u = vec![0.0; d];
                        u[0] = 1.0;
                        u
                    },
                });
                continue;
            }
            let mut attempt = 0u64;
            let mixing = loop {
                let mut rng = rng_for(&[seed, TAG_MIXING, a as u64, attempt]);
                let m = normal_vec(&mut rng, d * d, 1.0 / (d as f64).sqrt());
                let mixing = Matrix::from_fn(d, d, |r, c| {
                    let eye = if r == c { 1.0 } else { 0.0 };
                    eye + config.accent_strength * m[r * d + c]
                });
                if min_singular_value(&mixing) > MIN_SINGULAR_VALUE {
                    break mixing;
                }
                attempt += 1;
            };
            let mut rng = rng_for(&[seed, TAG_PROSODY, a as u64]);
            let period = rng.random_range(8.0..=20.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut direction = normal_vec(&mut rng, d, 1.0);
            let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            direction.iter_mut().for_each(|x| *x /= norm);
            accents.push(AccentParams {
                mixing,
                period,
                phase,
                direction,
            });
        }
        if config.identity_target_accent {
            // b_0 ≡ 0
            accents[0].direction = vec![0.0; d];
        }

        let mut rng = rng_for(&[seed, TAG_PROJECTION]);
        let projection = Matrix::from_vec(
            config.bnf_dim,
            d,
            normal_vec(&mut rng, config.bnf_dim * d, 1.0 / (d as f64).sqrt()),
        );

        let mut speakers = Vec::new();
        let mut push = |accent: usize, heldout: bool| {
            let index = speakers.len();
            let mut rng = rng_for(&[seed, TAG_SPEAKER, index as u64]);
            let gain = (0..d).map(|_| rng.random_range(0.5..=1.5)).collect();
            let bias = (0..d).map(|_| rng.random_range(-0.5..=0.5)).collect();
            speakers.push(SpeakerInfo {
                index,
                accent,
                heldout,
                timbre: Timbre { gain, bias },
            });
        };
        for _ in 0..config.target_speakers {
            push(0, false);
        }
        for a in 1..=k {
            for _ in 0..config.speakers_per_other_accent {
                push(a, false);
            }
        }
        for a in 1..=k {
            for _ in 0..config.heldout_speakers_per_other_accent {
                push(a, true);
            }
        }

        let symbols_t = symbols.transpose();
        let mixed: Vec<Matrix> = accents
            .iter()
            .map(|acc| acc.mixing.matmul(&symbols_t).transpose())
            .collect();
        let alpha = config.bnf_accent_leakage;
        let projection_t = projection.transpose();
        let bnf_table = mixed
            .iter()
            .map(|m| {
                // e + α(A − I)e = (1 − α)e + α·Ae
                let pre = symbols.zip_map(m, |e, ae| e + alpha * (ae - e));
                pre.matmul(&projection_t)
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            symbols,
            accents,
            projection,
            speakers,
            mixed,
            bnf_table,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Base vector `e(s)` for symbol `s ∈ 1..=V`.
    pub fn symbol_vector(&self, symbol: usize) -> &[f64] {
        self.symbols.row(symbol - 1)
    }

    pub fn accent(&self, accent: usize) -> &AccentParams {
        &self.accents[accent]
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn speakers(&self) -> &[SpeakerInfo] {
        &self.speakers
    }

    pub fn speaker(&self, index: usize) -> Option<&SpeakerInfo> {
        self.speakers.get(index)
    }

    pub fn training_speakers(&self) -> impl Iterator<Item = &SpeakerInfo> {
        self.speakers.iter().filter(|s| !s.heldout)
    }

    fn check_accent(&self, accent: usize) -> Result<()> {
        if accent > self.config.num_other_accents {
            return Err(Error::Contract(format!(
                "accent {accent} outside [0, {}]",
                self.config.num_other_accents
            )));
        }
        Ok(())
    }

    fn check_symbols(&self, content: &[usize]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match content.iter().find(|&&s| s == 0 || s > vocab) {
            Some(&symbol) => Err(Error::SymbolOutOfVocabulary { symbol, vocab }),
            None => Ok(()),
        }
    }

    /// General renderer. `timbre = None` renders with unit gain and zero bias;
    /// `noise_seed = None` disables the noise term.
    pub fn render(
        &self,
        content: &[usize],
        accent: usize,
        timbre: Option<&Timbre>,
        noise_seed: Option<u64>,
    ) -> Result<Matrix> {
        self.check_accent(accent)?;
        self.check_symbols(content)?;
        let params = &self.accents[accent];
        let mixed = &self.mixed[accent];
        let sigma = self.config.noise_sigma;
        let mut noise_rng = noise_seed.map(|s| rng_for(&[s, TAG_NOISE]));
        let mut mel = Matrix::zeros(content.len(), MEL_DIM);
        for (t, &s) in content.iter().enumerate() {
            let b = params.prosody(t);
            let base = mixed.row(s - 1);
            let row = mel.row_mut(t);
            for k in 0..MEL_DIM {
                let clean = base[k] + b * params.direction[k];
                row[k] = match timbre {
                    Some(tm) => tm.gain[k] * clean + tm.bias[k],
                    None => clean,
                };
            }
            if let Some(rng) = noise_rng.as_mut() {
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sigma * z;
                }
            }
        }
        Ok(mel)
    }

    pub fn render_mel(&self, factors: &SynthFactors, with_noise: bool) -> Result<Matrix> {
        self.render(
            &factors.content_seq,
            factors.accent_id,
            Some(&factors.timbre),
            with_noise.then_some(factors.noise_seed),
        )
    }

    pub fn render_bnf(&self, factors: &SynthFactors) -> Result<Matrix> {
        self.check_accent(factors.accent_id)?;
        self.check_symbols(&factors.content_seq)?;
        let table = &self.bnf_table[factors.accent_id];
        let d = self.config.bnf_dim;
        let mut bnf = Matrix::zeros(factors.frames(), d);
        for (t, &s) in factors.content_seq.iter().enumerate() {
            bnf.row_mut(t).copy_from_slice(table.row(s - 1));
        }
        Ok(bnf)
    }

    /// Piecewise-constant symbol sequence for an utterance seed. Depends only on
    /// the master seed and `utt_seed`, so equal seeds share content across accents.
    pub fn sample_content(&self, utt_seed: u64) -> Vec<usize> {
        let cfg = &self.config;
        let mut rng = rng_for(&[cfg.master_seed, TAG_CONTENT, utt_seed]);
        let [lo, hi] = cfg.utterance_frames;
        let [run_lo, run_hi] = cfg.frames_per_symbol;
        loop {
            let target = rng.random_range(lo..=hi);
            let mut seq = Vec::with_capacity(target + run_hi);
            let mut prev = 0usize;
            while seq.len() < target {
                let run = rng.random_range(run_lo..=run_hi);
                let symbol = loop {
                    let s = rng.random_range(1..=cfg.vocab_size);
                    if s != prev {
                        break s;
                    }
                };
                prev = symbol;
                seq.extend(std::iter::repeat_n(symbol, run));
            }
            if seq.len() <= hi {
                return seq;
            }
        }
    }

    pub fn sample_factors(
        &self,
        accent_id: usize,
        speaker_index: usize,
        utt_seed: u64,
    ) -> Result<SynthFactors> {
        self.check_accent(accent_id)?;
        let speaker = self
            .speakers
            .get(speaker_index)
            .filter(|s| s.accent == accent_id)
            .ok_or(Error::UnknownSpeaker {
                speaker: speaker_index,
                accent: accent_id,
            })?;
        Ok(SynthFactors {
            content_seq: self.sample_content(utt_seed),
            accent_id,
            speaker_index,
            timbre: speaker.timbre.clone(),
            utt_seed,
            noise_seed: derive_seed(&[
                self.config.master_seed,
                TAG_NOISE,
                utt_seed,
                accent_id as u64,
                speaker_index as u64,
            ]),
        })
    }

    pub fn utterance_from_factors(
        &self,
        id: impl Into<String>,
        factors: SynthFactors,
        split: Split,
    ) -> Result<Utterance> {
        let mel = self.render_mel(&factors, true)?;
        let bnf = self.render_bnf(&factors)?;
        Utterance::new(
            id,
            speaker_name(factors.speaker_index),
            factors.accent_id,
            mel,
            bnf,
            Some(factors),
            split,
        )
    }

    pub fn sample_utterance(
        &self,
        accent_id: usize,
        speaker_index: usize,
        utt_seed: u64,
    ) -> Result<Utterance> {
        let factors = self.sample_factors(accent_id, speaker_index, utt_seed)?;
        let id = format!("a{accent_id}-{}-u{utt_seed}", speaker_name(speaker_index));
        self.utterance_from_factors(id, factors, Split::Train)
    }

    /// Ground truth: the utterance re-rendered in `new_accent`, noise off.
    pub fn oracle_convert(&self, utt: &Utterance, new_accent: usize) -> Result<Matrix> {
        let f = utt
            .factors
            .as_ref()
            .ok_or_else(|| Error::MissingFactors(utt.id.clone()))?;
        self.render(&f.content_seq, new_accent, Some(&f.timbre), None)
    }

    /// Noise-free rendering of the utterance itself.
    pub fn denoised(&self, utt: &Utterance) -> Result<Matrix> {
        let f = utt
            .factors
            .as_ref()
            .ok_or_else(|| Error::MissingFactors(utt.id.clone()))?;
        self.render_mel(f, false)
    }

    /// Noise sub-seed used when re-rendering `factors` with another speaker's timbre.
    pub fn swap_noise_seed(&self, factors: &SynthFactors, new_speaker: usize) -> u64 {
        if new_speaker == factors.speaker_index {
            factors.noise_seed
        } else {
            derive_seed(&[factors.noise_seed, TAG_SWAP, new_speaker as u64])
        }
    }

    /// Same content and accent, timbre of `new_speaker`, fresh noise.
    pub fn timbre_swap(&self, utt: &Utterance, new_speaker: usize) -> Result<Matrix> {
        let f = utt
            .factors
            .as_ref()
            .ok_or_else(|| Error::MissingFactors(utt.id.clone()))?;
        let speaker = self.speakers.get(new_speaker).ok_or(Error::UnknownSpeaker {
            speaker: new_speaker,
            accent: f.accent_id,
        })?;
        self.render(
            &f.content_seq,
            f.accent_id,
            Some(&speaker.timbre),
            Some(self.swap_noise_seed(f, new_speaker)),
        )
    }

    /// Rebuild factors from a sidecar record.
    pub fn factors_from_record(&self, record: &FactorsRecord) -> Result<SynthFactors> {
        self.sample_factors(record.accent_id, record.speaker_index, record.utt_seed)
    }

    /// The list of `(split, accent, speaker, utt_seed)` a dataset will contain.
    fn dataset_plan(&self, counts: &DatasetCounts) -> Vec<(Split, usize, usize, u64)> {
        let seed = self.config.master_seed;
        let mut plan = Vec::with_capacity(counts.total());
        let target: Vec<usize> = self
            .speakers
            .iter()
            .filter(|s| s.accent == 0 && !s.heldout)
            .map(|s| s.index)
            .collect();
        let other: Vec<usize> = self
            .speakers
            .iter()
            .filter(|s| s.accent != 0 && !s.heldout)
            .map(|s| s.index)
            .collect();
        let heldout: Vec<usize> = self
            .speakers
            .iter()
            .filter(|s| s.heldout)
            .map(|s| s.index)
            .collect();
        let groups: [(Split, &[usize], usize); 5] = [
            (Split::Train, &target, counts.train_target),
            (Split::Train, &other, counts.train_other),
            (Split::Valid, &target, counts.valid_target),
            (Split::Valid, &other, counts.valid_other),
            (Split::Test, &heldout, counts.test_other),
        ];
        for (group, (split, pool, n)) in groups.into_iter().enumerate() {
            for i in 0..n {
                let spk = pool[i % pool.len()];
                let utt_seed = derive_seed(&[seed, TAG_DATASET, group as u64, i as u64]);
                plan.push((split, self.speakers[spk].accent, spk, utt_seed));
            }
        }
        plan
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

/// Generate tensors, manifest, factors sidecar and generator record under `out_dir`.
pub fn generate_dataset(
    config: &GeneratorConfig,
    counts: &DatasetCounts,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut config = config.clone();
    config.counts = counts.clone();
    let generator = Generator::new(&config)?;
    let plan = generator.dataset_plan(counts);

    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let rows: Vec<(ManifestEntry, FactorsRecord)> = plan
        .par_iter()
        .enumerate()
        .map(|(ordinal, &(split, accent, speaker, utt_seed))| {
            let id = format!(
                "{}-{ordinal:05}-a{accent}-{}",
                split_name(split),
                speaker_name(speaker)
            );
            let factors = generator.sample_factors(accent, speaker, utt_seed)?;
            let utt = generator.utterance_from_factors(id.clone(), factors, split)?;
            let mel_path = format!("tensors/{id}.mel.psdn");
            let bnf_path = format!("tensors/{id}.bnf.psdn");
            write_matrix(&out_dir.join(&mel_path), &utt.mel)?;
            write_matrix(&out_dir.join(&bnf_path), &utt.bnf)?;
            Ok((
                ManifestEntry {
                    id: id.clone(),
                    speaker_id: utt.speaker_id.clone(),
                    accent_label: accent,
                    mel_path,
                    bnf_path,
                    split,
                },
                FactorsRecord {
                    id,
                    accent_id: accent,
                    speaker_index: speaker,
                    utt_seed,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let (entries, factors): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &entries)?;

    let mut sidecar = Vec::new();
    for f in &factors {
        serde_json::to_writer(&mut sidecar, f).map_err(|e| Error::json("factors record", e))?;
        sidecar.push(b'\n');
    }
    let factors_path = out_dir.join(FACTORS_FILE);
    fs::File::create(&factors_path)
        .and_then(|mut f| f.write_all(&sidecar))
        .map_err(|e| Error::io(&factors_path, e))?;

    GeneratorRecord::new(config).save(&out_dir.join(GENERATOR_RECORD_FILE))?;
    crate::data::load_manifest(&manifest_path)
}

/// Speakers that appear in a split, by name.
pub fn speakers_in(manifest: &DatasetManifest, split: Split) -> BTreeSet<String> {
    manifest.split(split).map(|e| e.speaker_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator() -> Generator {
        Generator::new(&GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn identity_accent_unit_timbre_reproduces_symbol_vectors() {
        let cfg = GeneratorConfig {
            identity_target_accent: true,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let g = Generator::new(&cfg).unwrap();
        let content = vec![3, 3, 3, 3, 7, 7, 7, 7, 7];
        let mel = g.render(&content, 0, Some(&Timbre::identity()), Some(11)).unwrap();
        for (t, &s) in content.iter().enumerate() {
            assert_eq!(mel.row(t), g.symbol_vector(s));
        }
    }

    #[test]
    fn render_is_deterministic_and_validates_symbols() {
        let g = generator();
        let f = g.sample_factors(2, 12, 5).unwrap();
        assert!(g.render_mel(&f, false).unwrap().bits_eq(&g.render_mel(&f, false).unwrap()));
        assert!(g.render_mel(&f, true).unwrap().bits_eq(&g.render_mel(&f, true).unwrap()));
        let mut bad = f.clone();
        bad.content_seq[0] = 33;
        assert!(matches!(
            g.render_mel(&bad, false),
            Err(Error::SymbolOutOfVocabulary { symbol: 33, vocab: 32 })
        ));
    }

    #[test]
    fn bnf_leakage_vanishes_without_alpha_and_for_identity_target() {
        let cfg = GeneratorConfig {
            bnf_accent_leakage: 0.0,
            ..Default::default()
        };
        let g = Generator::new(&cfg).unwrap();
        let a = g.sample_factors(1, g.speakers().iter().position(|s| s.accent == 1).unwrap(), 4).unwrap();
        let b = g.sample_factors(2, g.speakers().iter().position(|s| s.accent == 2).unwrap(), 4).unwrap();
        assert_eq!(a.content_seq, b.content_seq);
        assert!(g.render_bnf(&a).unwrap().max_abs_diff(&g.render_bnf(&b).unwrap()) < 1e-12);

        let cfg = GeneratorConfig {
            identity_target_accent: true,
            ..Default::default()
        };
        let g = Generator::new(&cfg).unwrap();
        let f = g.sample_factors(0, 0, 4).unwrap();
        let bnf = g.render_bnf(&f).unwrap();
        for (t, &s) in f.content_seq.iter().enumerate() {
            let e = Matrix::row_vector(g.symbol_vector(s));
            let expect = e.matmul(&g.projection().transpose());
            assert!(Matrix::row_vector(bnf.row(t)).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn sampling_errors() {
        let g = generator();
        assert!(g.sample_utterance(5, 0, 0).is_err());
        assert!(matches!(
            g.sample_utterance(1, 0, 0),
            Err(Error::UnknownSpeaker { speaker: 0, accent: 1 })
        ));
    }

    #[test]
    fn content_runs_respect_configured_ranges() {
        let g = generator();
        for seed in 0..50 {
            let seq = g.sample_content(seed);
            assert!((40..=120).contains(&seq.len()));
            let mut runs = Vec::new();
            let mut start = 0;
            for t in 1..=seq.len() {
                if t == seq.len() || seq[t] != seq[start] {
                    runs.push(t - start);
                    start = t;
                }
            }
            assert!(runs.iter().all(|r| (4..=8).contains(r)), "{runs:?}");
        }
    }

    #[test]
    fn oracle_convert_to_own_accent_is_denoised_input() {
        let g = generator();
        let utt = g.sample_utterance(3, 17, 9).unwrap();
        assert!(g
            .oracle_convert(&utt, 3)
            .unwrap()
            .bits_eq(&g.denoised(&utt).unwrap()));
    }

    #[test]
    fn oracle_difference_is_accent_closed_form_with_unit_timbre() {
        let g = generator();
        let mut f = g.sample_factors(1, 1, 21).unwrap();
        f.timbre = Timbre::identity();
        let utt = g.utterance_from_factors("x", f.clone(), Split::Train).unwrap();
        let old = g.oracle_convert(&utt, 1).unwrap();
        let new = g.oracle_convert(&utt, 4).unwrap();
        let (a_old, a_new) = (g.accent(1), g.accent(4));
        for (t, &s) in f.content_seq.iter().enumerate() {
            let e = g.symbol_vector(s);
            for k in 0..MEL_DIM {
                let mut expect = 0.0;
                for j in 0..MEL_DIM {
                    expect += (a_new.mixing.get(k, j) - a_old.mixing.get(k, j)) * e[j];
                }
                expect += a_new.trajectory(t)[k] - a_old.trajectory(t)[k];
                let got = new.get(t, k) - old.get(t, k);
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn timbre_swap_to_same_speaker_is_identity() {
        let g = generator();
        let utt = g.sample_utterance(2, 9, 3).unwrap();
        assert!(g.timbre_swap(&utt, 9).unwrap().bits_eq(&utt.mel));
        assert!(!g.timbre_swap(&utt, 10).unwrap().bits_eq(&utt.mel));
        let mut real = utt.clone();
        real.factors = None;
        assert!(matches!(g.timbre_swap(&real, 3), Err(Error::MissingFactors(_))));
    }

    #[test]
    fn mixing_matrices_are_well_conditioned() {
        let g = generator();
        for a in 0..=4 {
            assert!(min_singular_value(&g.accent(a).mixing) > MIN_SINGULAR_VALUE);
        }
    }

    #[test]
    fn config_validation() {
        for bad in [
            GeneratorConfig { vocab_size: 1, ..Default::default() },
            GeneratorConfig { num_other_accents: 0, ..Default::default() },
            GeneratorConfig { accent_strength: 0.0, ..Default::default() },
            GeneratorConfig { bnf_accent_leakage: -0.1, ..Default::default() },
            GeneratorConfig { frames_per_symbol: [5, 4], ..Default::default() },
            GeneratorConfig { mel_dim: 40, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
