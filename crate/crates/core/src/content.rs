//! Content encoder over BNF features and the adversarial accent classifier
//! attached to it through a gradient reversal layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::AccentLabelSet;
use crate::error::{Error, Result};
use crate::nn::{Conformer, ConformerConfig, ConvResBlock, Graph, Linear, Lstm, ParamStore, Scope, Var};

pub const GRL_LAMBDA: f64 = 5e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentConfig {
    pub bnf_dim: usize,
    pub encoder: ConformerConfig,
    /// Hidden size per direction of the classifier's recurrent layer.
    pub classifier_hidden: usize,
    pub classifier_channels: usize,
    pub downsample_rates: Vec<usize>,
}

impl ContentConfig {
    /// Widths as published: encoder 512, classifier 256 per direction.
    pub fn paper(bnf_dim: usize) -> Self {
        Self {
            bnf_dim,
            encoder: ConformerConfig::with_width(512),
            classifier_hidden: 256,
            classifier_channels: 256,
            downsample_rates: vec![4, 2, 2, 2],
        }
    }

    /// Paper structure with every width set to `width`.
    pub fn uniform(bnf_dim: usize, width: usize) -> Self {
        Self {
            bnf_dim,
            encoder: ConformerConfig::with_width(width),
            classifier_hidden: width,
            classifier_channels: width,
            downsample_rates: vec![4, 2, 2, 2],
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.downsample_rates.iter().product()
    }
}

/// `E_content`: linear projection of BNF frames followed by a Conformer stack.
#[derive(Clone, Debug)]
pub struct ContentEncoder {
    input: Linear,
    conformer: Conformer,
    bnf_dim: usize,
}

impl ContentEncoder {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, cfg: &ContentConfig) -> Self {
        Self {
            input: Linear::new(&mut s.sub("input"), cfg.bnf_dim, cfg.encoder.width),
            conformer: Conformer::new(&mut s.sub("conformer"), cfg.encoder),
            bnf_dim: cfg.bnf_dim,
        }
    }

    pub fn width(&self) -> usize {
        self.conformer.config.width
    }

    pub fn depth(&self) -> usize {
        self.conformer.depth()
    }

    /// `[T × D_bnf]` → `[T × H]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bnf: Var) -> Result<Var> {
        let (t, d) = g.shape(bnf);
        if t == 0 {
            return Err(Error::Shape("content encoder received no frames".into()));
        }
        if d != self.bnf_dim {
            return Err(Error::Shape(format!(
                "content encoder expects {} BNF channels, got {d}",
                self.bnf_dim
            )));
        }
        let x = self.input.forward(g, store, bnf);
        Ok(self.conformer.forward(g, store, x))
    }
}

/// Frames fed to the classifier for an input of `frames` frames: the next
/// multiple of the total downsampling factor.
pub fn classifier_frames(frames: usize, factor: usize) -> usize {
    frames.max(1).div_ceil(factor) * factor
}

/// `C_accent`: bidirectional LSTM, strided residual conv blocks, mean pool and
/// a two-way head (target accent vs. other).
#[derive(Clone, Debug)]
pub struct AccentClassifier {
    forward_rnn: Lstm,
    backward_rnn: Lstm,
    blocks: Vec<ConvResBlock>,
    head: Linear,
    factor: usize,
}

impl AccentClassifier {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, cfg: &ContentConfig) -> Self {
        let width = cfg.encoder.width;
        let hidden = cfg.classifier_hidden;
        let ch = cfg.classifier_channels;
        let mut blocks = Vec::with_capacity(cfg.downsample_rates.len());
        let mut input = 2 * hidden;
        for (i, &rate) in cfg.downsample_rates.iter().enumerate() {
            blocks.push(ConvResBlock::new(&mut s.sub(&format!("block{i}")), input, ch, rate));
            input = ch;
        }
        Self {
            forward_rnn: Lstm::new(&mut s.sub("rnn_forward"), width, hidden),
            backward_rnn: Lstm::new(&mut s.sub("rnn_backward"), width, hidden),
            blocks,
            head: Linear::new(&mut s.sub("head"), ch, 2),
            factor: cfg.downsample_factor(),
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.factor
    }

    /// Per-block output lengths for an input of `frames` frames.
    pub fn stage_lengths(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Vec<usize> {
        let mut lengths = Vec::new();
        let mut h = self.recurrent(g, store, x);
        for b in &self.blocks {
            h = b.forward(g, store, h);
            lengths.push(g.shape(h).0);
        }
        lengths
    }

    fn recurrent(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let t = g.shape(x).0;
        let x = g.pad_repeat_last(x, classifier_frames(t, self.factor));
        let f = self.forward_rnn.forward(g, store, x, false);
        let b = self.backward_rnn.forward(g, store, x, true);
        g.concat_cols(&[f, b])
    }

    /// Two logits `[1 × 2]` for `f_content` after the gradient reversal layer
    /// with coefficient `lambda`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_content: Var, lambda: f64) -> Result<Var> {
        if g.shape(f_content).0 == 0 {
            return Err(Error::Shape("accent classifier received no frames".into()));
        }
        let x = g.grl(f_content, lambda);
        let mut h = self.recurrent(g, store, x);
        for b in &self.blocks {
            h = b.forward(g, store, h);
        }
        let pooled = g.mean_rows(h);
        Ok(self.head.forward(g, store, pooled))
    }
}

/// Mean two-class cross-entropy over a batch of `[1 × 2]` logits.
pub fn content_loss(g: &mut Graph, logits: &[Var], labels: &[AccentLabelSet]) -> Var {
    assert_eq!(logits.len(), labels.len(), "one label per prediction");
    let stacked = g.concat_rows(logits);
    let classes: Vec<usize> = labels.iter().map(AccentLabelSet::binary_class).collect();
    g.cross_entropy(stacked, &classes)
}
