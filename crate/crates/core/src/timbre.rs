//! Global timbre encoder (convolutional reference encoder, GRU and style-token
//! attention) and the speaker augmentation stage.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Utterance, MEL_DIM};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{normal, uniform_fan_in, BatchNorm, Geometry2d, Graph, Gru, Linear, ParamId, ParamStore, Scope, Var};
use crate::synthgen::{speaker_name, Generator};

/// Shorter inputs are padded by repeating the last frame.
pub const MIN_TIMBRE_FRAMES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimbreConfig {
    pub conv_channels: Vec<usize>,
    pub gru_hidden: usize,
    pub tokens: usize,
    pub token_dim: usize,
}

impl TimbreConfig {
    pub fn paper() -> Self {
        Self {
            conv_channels: vec![16, 32, 64, 128],
            gru_hidden: 256,
            tokens: 20,
            token_dim: 256,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    norm: BatchNorm,
}

/// Maps a mel spectrogram to a single timbre vector of width `token_dim`.
#[derive(Clone, Debug)]
pub struct TimbreEncoder {
    convs: Vec<ConvLayer>,
    gru: Gru,
    query: Linear,
    key: Linear,
    tokens: ParamId,
    token_dim: usize,
}

fn reduced(len: usize, layers: usize) -> usize {
    (0..layers).fold(len, |l, _| crate::nn::conv_out_len(l, 3, 2, 1))
}

impl TimbreEncoder {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, cfg: &TimbreConfig) -> Self {
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut input = 1;
        for (i, &ch) in cfg.conv_channels.iter().enumerate() {
            let mut layer = s.sub(&format!("conv{i}"));
            let fan_in = 9 * input;
            let w = uniform_fan_in(layer.rng, fan_in, ch, fan_in);
            let b = uniform_fan_in(layer.rng, 1, ch, fan_in);
            convs.push(ConvLayer {
                w: layer.add("w", w, true),
                b: layer.add("b", b, true),
                norm: BatchNorm::new(&mut layer.sub("norm"), ch),
            });
            input = ch;
        }
        let width_out = reduced(MEL_DIM, cfg.conv_channels.len());
        let gru_input = width_out * input;
        let gru = Gru::new(&mut s.sub("gru"), gru_input, cfg.gru_hidden);
        let query = Linear::new(&mut s.sub("query"), cfg.gru_hidden, cfg.token_dim);
        let key = Linear::new(&mut s.sub("key"), cfg.token_dim, cfg.token_dim);
        let tokens = normal(s.rng, cfg.tokens, cfg.token_dim, 0.5);
        Self {
            convs,
            gru,
            query,
            key,
            tokens: s.add("tokens", tokens, true),
            token_dim: cfg.token_dim,
        }
    }

    pub fn output_width(&self) -> usize {
        self.token_dim
    }

    pub fn tokens(&self) -> ParamId {
        self.tokens
    }

    /// One timbre vector `[1 × token_dim]` per mel. Batch normalization pools
    /// statistics over every item of the batch in train mode.
    pub fn forward_batch(&self, g: &mut Graph, store: &ParamStore, mels: &[Var]) -> Result<Vec<Var>> {
        let mut maps = Vec::with_capacity(mels.len());
        for &mel in mels {
            let (t, d) = g.shape(mel);
            if t == 0 {
                return Err(Error::Shape("timbre encoder received no frames".into()));
            }
            if d != MEL_DIM {
                return Err(Error::Shape(format!("timbre encoder expects {MEL_DIM} channels, got {d}")));
            }
            let padded = g.pad_repeat_last(mel, t.max(MIN_TIMBRE_FRAMES));
            let rows = g.shape(padded).0;
            let map = g.reshape(padded, rows * MEL_DIM, 1);
            maps.push((map, Geometry2d { height: rows, width: MEL_DIM }));
        }
        for layer in &self.convs {
            let (w, b) = (g.param(store, layer.w), g.param(store, layer.b));
            let conv: Vec<(Var, Geometry2d)> = maps
                .iter()
                .map(|&(x, geom)| g.conv2d(x, geom, w, b, 3, 2, 1))
                .collect();
            let joined: Vec<Var> = conv.iter().map(|c| c.0).collect();
            let all = g.concat_rows(&joined);
            let normed = layer.norm.forward(g, store, all);
            let act = g.relu(normed);
            let mut offset = 0;
            maps.clear();
            for (x, geom) in conv {
                let rows = g.shape(x).0;
                maps.push((g.slice_rows(act, offset, rows), geom));
                offset += rows;
            }
        }
        let tokens = g.param(store, self.tokens);
        let keys = self.key.forward(g, store, tokens);
        let mut out = Vec::with_capacity(maps.len());
        for (x, geom) in maps {
            let channels = g.shape(x).1;
            let seq = g.reshape(x, geom.height, geom.width * channels);
            let state = self.gru.forward_last(g, store, seq);
            let q = self.query.forward(g, store, state);
            out.push(g.attention(q, keys, tokens, 1));
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Result<Var> {
        Ok(self.forward_batch(g, store, &[mel])?.remove(0))
    }
}

/// Replaces the timbre of an utterance while keeping content and accent.
pub trait TimbreAugmenter: Sync {
    fn convert(&self, utt: &Utterance, new_speaker_index: usize, seed: u64) -> Result<Matrix>;
}

/// Augmenter backed by the synthetic generator's exact timbre swap. The swap
/// noise is derived from the utterance and the new speaker, so `seed` is unused.
#[derive(Clone, Copy, Debug)]
pub struct OracleAugmenter<'a> {
    pub generator: &'a Generator,
}

impl TimbreAugmenter for OracleAugmenter<'_> {
    fn convert(&self, utt: &Utterance, new_speaker_index: usize, _seed: u64) -> Result<Matrix> {
        self.generator.timbre_swap(utt, new_speaker_index)
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedUtterance<'a> {
    pub base: &'a Utterance,
    pub mel_aug: Cow<'a, Matrix>,
    pub was_converted: bool,
    pub aug_speaker_index: Option<usize>,
}

impl<'a> AugmentedUtterance<'a> {
    pub fn unchanged(base: &'a Utterance) -> Self {
        Self {
            base,
            mel_aug: Cow::Borrowed(&base.mel),
            was_converted: false,
            aug_speaker_index: None,
        }
    }
}

/// With probability `p_convert`, re-renders `utt` with a speaker drawn
/// uniformly from `candidates` (excluding its own speaker).
pub fn augment_speaker<'a>(
    utt: &'a Utterance,
    p_convert: f64,
    rng: &mut impl Rng,
    augmenter: &dyn TimbreAugmenter,
    candidates: &[usize],
) -> Result<AugmentedUtterance<'a>> {
    if !(0.0..=1.0).contains(&p_convert) {
        return Err(Error::Config(format!("p_convert {p_convert} outside [0, 1]")));
    }
    let draw: f64 = rng.random();
    if draw >= p_convert {
        return Ok(AugmentedUtterance::unchanged(utt));
    }
    let pool: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&s| speaker_name(s) != utt.speaker_id)
        .collect();
    if pool.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no speaker other than {} to convert to",
            utt.speaker_id
        )));
    }
    let speaker = pool[rng.random_range(0..pool.len())];
    let seed: u64 = rng.random();
    let mel = augmenter
        .convert(utt, speaker, seed)
        .map_err(|e| Error::Augmenter {
            id: utt.id.clone(),
            source: Box::new(e),
        })?;
    if mel.shape() != utt.mel.shape() {
        return Err(Error::Augmenter {
            id: utt.id.clone(),
            source: Box::new(Error::Shape("augmenter changed the mel shape".into())),
        });
    }
    Ok(AugmentedUtterance {
        base: utt,
        mel_aug: Cow::Owned(mel),
        was_converted: true,
        aug_speaker_index: Some(speaker),
    })
}
