//! The pseudo-Siamese disentanglement network: target stream, auxiliary
//! encoder and stream, loss routing, and the assembled model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::content::{AccentClassifier, ContentConfig, ContentEncoder};
use crate::data::{Utterance, MEL_DIM};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Conformer, ConformerConfig, ConvResBlock, Graph, Linear, ParamStore, Scope, Var};
use crate::seed::rng_for;
use crate::timbre::{TimbreConfig, TimbreEncoder};

/// Width of the auxiliary features.
pub const AUX_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Psdn,
    GrlOnlyBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Psdn => "psdn",
            Variant::GrlOnlyBaseline => "grl_only_baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub content: ContentConfig,
    pub timbre: TimbreConfig,
    pub decoder: ConformerConfig,
    pub aux_channels: Vec<usize>,
}

impl ModelConfig {
    /// Published widths: 512-wide Conformers, 256-wide classifier and timbre path.
    pub fn paper(bnf_dim: usize) -> Self {
        Self {
            content: ContentConfig::paper(bnf_dim),
            timbre: TimbreConfig::paper(),
            decoder: ConformerConfig::with_width(512),
            aux_channels: vec![128, 128, 128, AUX_DIM],
        }
    }

    /// Paper structure with Conformer and classifier widths set to `width`.
    /// The timbre and auxiliary paths keep their published widths.
    pub fn desk(bnf_dim: usize, width: usize) -> Self {
        Self {
            content: ContentConfig::uniform(bnf_dim, width),
            timbre: TimbreConfig::paper(),
            decoder: ConformerConfig::with_width(width),
            aux_channels: vec![128, 128, 128, AUX_DIM],
        }
    }

    /// Width 8 everywhere; for gradient checks and fast tests.
    pub fn tiny(bnf_dim: usize) -> Self {
        Self {
            content: ContentConfig::uniform(bnf_dim, 8),
            timbre: TimbreConfig {
                conv_channels: vec![2, 2, 4, 4],
                gru_hidden: 4,
                tokens: 3,
                token_dim: 4,
            },
            decoder: ConformerConfig::with_width(8),
            aux_channels: vec![4, 4, 4, AUX_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        for c in [&self.content.encoder, &self.decoder] {
            check(c.width > 0 && c.width % c.heads == 0 && c.width % 2 == 0, "conformer width must be even and divisible by heads")?;
            check(c.blocks > 0 && c.conv_kernel % 2 == 1, "conformer needs blocks and an odd conv kernel")?;
        }
        check(self.content.bnf_dim > 0, "bnf_dim must be positive")?;
        check(!self.content.downsample_rates.is_empty(), "classifier needs downsampling blocks")?;
        check(self.timbre.tokens > 0 && self.timbre.token_dim > 0, "timbre tokens must be non-empty")?;
        check(self.aux_channels.last() == Some(&AUX_DIM), "aux encoder must end with 16 channels")?;
        Ok(())
    }
}

/// Auxiliary encoder over the raw mel: stride-1 residual conv blocks.
#[derive(Clone, Debug)]
pub struct AuxEncoder {
    blocks: Vec<ConvResBlock>,
}

impl AuxEncoder {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, channels: &[usize]) -> Self {
        let mut input = MEL_DIM;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                let b = ConvResBlock::new(&mut s.sub(&format!("block{i}")), input, ch, 1);
                input = ch;
                b
            })
            .collect();
        Self { blocks }
    }

    /// `[T × 80]` → `[T × 16]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Result<Var> {
        check_mel(g, mel)?;
        let mut h = mel;
        for b in &self.blocks {
            h = b.forward(g, store, h);
        }
        Ok(h)
    }
}

fn check_mel(g: &Graph, mel: Var) -> Result<()> {
    let (t, d) = g.shape(mel);
    if t == 0 || d != MEL_DIM {
        return Err(Error::Shape(format!("expected a [T × {MEL_DIM}] mel with T ≥ 1, got [{t} × {d}]")));
    }
    Ok(())
}

/// A decoding stream: broadcast-concatenated conditioning, linear projection,
/// Conformer stack and an 80-channel output layer.
#[derive(Clone, Debug)]
pub struct Decoder {
    input: Linear,
    conformer: Conformer,
    output: Linear,
    content_dim: usize,
    timbre_dim: usize,
    aux_dim: usize,
}

impl Decoder {
    pub fn new<R: Rng>(
        s: &mut Scope<'_, R>,
        cfg: ConformerConfig,
        content_dim: usize,
        timbre_dim: usize,
        aux_dim: usize,
    ) -> Self {
        let input_dim = content_dim + timbre_dim + aux_dim;
        Self {
            input: Linear::new(&mut s.sub("input"), input_dim, cfg.width),
            conformer: Conformer::new(&mut s.sub("conformer"), cfg),
            output: Linear::new(&mut s.sub("output"), cfg.width, MEL_DIM),
            content_dim,
            timbre_dim,
            aux_dim,
        }
    }

    pub fn depth(&self) -> usize {
        self.conformer.depth()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_content: Var,
        f_timbre: Var,
        f_aux: Option<Var>,
    ) -> Result<Var> {
        let (t, c) = g.shape(f_content);
        if t == 0 || c != self.content_dim {
            return Err(Error::Shape(format!("decoder content input [{t} × {c}], expected width {}", self.content_dim)));
        }
        if g.shape(f_timbre) != (1, self.timbre_dim) {
            return Err(Error::Shape(format!("decoder timbre input must be [1 × {}]", self.timbre_dim)));
        }
        let timbre = g.broadcast_rows(f_timbre, t);
        let x = match (f_aux, self.aux_dim) {
            (None, 0) => g.concat_cols(&[f_content, timbre]),
            (Some(a), d) if d > 0 && g.shape(a) == (t, d) => g.concat_cols(&[f_content, timbre, a]),
            _ => return Err(Error::Shape("auxiliary features do not match the decoder".into())),
        };
        let h = self.input.forward(g, store, x);
        let h = self.conformer.forward(g, store, h);
        Ok(self.output.forward(g, store, h))
    }
}

/// Per-variant decoding heads.
#[derive(Clone, Debug)]
pub enum Streams {
    Psdn {
        target: Decoder,
        aux_encoder: AuxEncoder,
        aux: Decoder,
    },
    Baseline {
        dec_target: Decoder,
        dec_other: Decoder,
    },
}

/// A complete model: parameters plus the layer structure that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub content_encoder: ContentEncoder,
    pub classifier: AccentClassifier,
    pub timbre: TimbreEncoder,
    pub streams: Streams,
}

const TAG_CONTENT: u64 = 0xC0;
const TAG_TIMBRE: u64 = 0x71;
const TAG_TARGET: u64 = 0x7A;
const TAG_AUX: u64 = 0xA0;

impl Model {
    /// Builds and initializes a model. The content and timbre modules draw from
    /// their own seeded streams, so both variants share them for equal seeds.
    pub fn build(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (content_encoder, classifier) = {
            let mut rng = rng_for(&[seed, TAG_CONTENT]);
            let mut s = Scope::new(&mut store, &mut rng, "content");
            let enc = ContentEncoder::new(&mut s.sub("encoder"), &config.content);
            let cls = AccentClassifier::new(&mut s.sub("classifier"), &config.content);
            (enc, cls)
        };
        let timbre = {
            let mut rng = rng_for(&[seed, TAG_TIMBRE]);
            TimbreEncoder::new(&mut Scope::new(&mut store, &mut rng, "timbre"), &config.timbre)
        };
        let h = config.content.encoder.width;
        let td = config.timbre.token_dim;
        let streams = match variant {
            Variant::Psdn => {
                let mut rng = rng_for(&[seed, TAG_TARGET]);
                let target = Decoder::new(&mut Scope::new(&mut store, &mut rng, "psdn.target"), config.decoder, h, td, 0);
                let mut rng = rng_for(&[seed, TAG_AUX]);
                let aux_encoder = AuxEncoder::new(&mut Scope::new(&mut store, &mut rng, "psdn.aux_encoder"), &config.aux_channels);
                let aux = Decoder::new(&mut Scope::new(&mut store, &mut rng, "psdn.aux"), config.decoder, h, td, AUX_DIM);
                Streams::Psdn { target, aux_encoder, aux }
            }
            Variant::GrlOnlyBaseline => {
                let mut rng = rng_for(&[seed, TAG_TARGET]);
                let dec_target = Decoder::new(&mut Scope::new(&mut store, &mut rng, "baseline.dec_target"), config.decoder, h, td, 0);
                let mut rng = rng_for(&[seed, TAG_AUX]);
                let dec_other = Decoder::new(&mut Scope::new(&mut store, &mut rng, "baseline.dec_other"), config.decoder, h, td, 0);
                Streams::Baseline { dec_target, dec_other }
            }
        };
        Ok(Self {
            variant,
            config: config.clone(),
            store,
            content_encoder,
            classifier,
            timbre,
            streams,
        })
    }

    /// Top-level parameter namespaces, in registration order.
    pub fn namespaces(&self) -> Vec<&'static str> {
        match self.variant {
            Variant::Psdn => vec!["content", "timbre", "psdn.target", "psdn.aux_encoder", "psdn.aux"],
            Variant::GrlOnlyBaseline => vec!["content", "timbre", "baseline.dec_target", "baseline.dec_other"],
        }
    }

    /// The stream used at inference time.
    pub fn target_decoder(&self) -> &Decoder {
        match &self.streams {
            Streams::Psdn { target, .. } => target,
            Streams::Baseline { dec_target, .. } => dec_target,
        }
    }

    /// Prefix of the parameters that inference must never read.
    pub fn auxiliary_prefixes(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::Psdn => &["psdn.aux_encoder.", "psdn.aux."],
            Variant::GrlOnlyBaseline => &["baseline.dec_other."],
        }
    }

    /// `F_content` of a BNF matrix, evaluation mode.
    pub fn encode_content(&self, bnf: &Matrix) -> Result<Matrix> {
        let mut g = Graph::inference();
        let x = g.constant(bnf.clone());
        let y = self.content_encoder.forward(&mut g, &self.store, x)?;
        Ok(g.value(y).clone())
    }

    /// `F_timbre` of a mel matrix, evaluation mode.
    pub fn encode_timbre(&self, mel: &Matrix) -> Result<Matrix> {
        let mut g = Graph::inference();
        let x = g.constant(mel.clone());
        let y = self.timbre.forward(&mut g, &self.store, x)?;
        Ok(g.value(y).clone())
    }

    /// Accent conversion: content from the BNF, timbre from the mel, decoded by
    /// the target stream only.
    pub fn convert(&self, utt: &Utterance) -> Result<Matrix> {
        let mut g = Graph::inference();
        let bnf = g.constant(utt.bnf.clone());
        let mel = g.constant(utt.mel.clone());
        let f_content = self.content_encoder.forward(&mut g, &self.store, bnf)?;
        let f_timbre = self.timbre.forward(&mut g, &self.store, mel)?;
        let out = self.target_decoder().forward(&mut g, &self.store, f_content, f_timbre, None)?;
        let out = g.value(out).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("conversion of {}", utt.id)));
        }
        Ok(out)
    }
}

/// The loss parts of one step. `total` is always the unweighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content_loss: f64,
    pub accent_target_term: f64,
    pub accent_aux_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(content_loss: f64, accent_target_term: f64, accent_aux_term: f64) -> Self {
        Self {
            content_loss,
            accent_target_term,
            accent_aux_term,
            total: total_loss(content_loss, accent_target_term, accent_aux_term),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.content_loss.is_finite()
            && self.accent_target_term.is_finite()
            && self.accent_aux_term.is_finite()
            && self.total.is_finite()
    }
}

pub fn total_loss(content_loss: f64, accent_target_term: f64, accent_aux_term: f64) -> f64 {
    content_loss + accent_target_term + accent_aux_term
}

/// Routed reconstruction terms of one item: the target term exists exactly for
/// target-accent items, the auxiliary term for every item.
pub fn accent_loss(
    g: &mut Graph,
    pred_target: Option<Var>,
    pred_aux: Var,
    y_aug_mel: Var,
    is_target_accent: bool,
) -> Result<(Option<Var>, Var)> {
    match (pred_target, is_target_accent) {
        (Some(_), false) => {
            return Err(Error::Contract("target-stream prediction supplied for an other-accent item".into()))
        }
        (None, true) => {
            return Err(Error::Contract("target-accent item is missing its target-stream prediction".into()))
        }
        _ => {}
    }
    let target = pred_target.map(|p| g.l1_loss(p, y_aug_mel));
    let aux = g.l1_loss(pred_aux, y_aug_mel);
    Ok((target, aux))
}
