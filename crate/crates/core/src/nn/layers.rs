//! Parameterized layers. Each layer owns the ids of its parameters in a
//! [`ParamStore`] and builds its computation into a [`Graph`] on demand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{orthogonal, uniform_fan_in, ParamId, ParamStore};
use crate::matrix::Matrix;

/// Parameter registration under a dotted name prefix.
pub struct Scope<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Scope<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: impl Into<String>) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_, R> {
        Scope {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn add(&mut self, name: &str, value: Matrix, trainable: bool) -> ParamId {
        self.store.add(format!("{}.{name}", self.prefix), value, trainable)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, input: usize, output: usize) -> Self {
        let w = uniform_fan_in(s.rng, input, output, input);
        let b = uniform_fan_in(s.rng, 1, output, input);
        Self {
            w: s.add("w", w, true),
            b: s.add("b", b, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, width: usize) -> Self {
        Self {
            gamma: s.add("gamma", Matrix::filled(1, width, 1.0), true),
            beta: s.add("beta", Matrix::zeros(1, width), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Batch normalization with running statistics stored as non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, width: usize) -> Self {
        Self {
            gamma: s.add("gamma", Matrix::filled(1, width, 1.0), true),
            beta: s.add("beta", Matrix::zeros(1, width), true),
            running_mean: s.add("running_mean", Matrix::zeros(1, width), false),
            running_var: s.add("running_var", Matrix::filled(1, width, 1.0), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.batch_norm(store, x, gm, bt, self.running_mean, self.running_var)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        s: &mut Scope<'_, R>,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * input;
        let w = uniform_fan_in(s.rng, fan_in, output, fan_in);
        let b = uniform_fan_in(s.rng, 1, output, fan_in);
        Self {
            w: s.add("w", w, true),
            b: s.add("b", b, true),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv1d(x, w, b, self.kernel, self.stride, self.pad)
    }
}

/// Two kernel-3 convolutions with LeakyReLU and a residual path; the first
/// convolution carries the temporal stride.
#[derive(Clone, Debug)]
pub struct ConvResBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    /// 1×1 projection when the shape changes, identity otherwise.
    pub skip: Option<Conv1d>,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl ConvResBlock {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, input: usize, output: usize, stride: usize) -> Self {
        let conv1 = Conv1d::new(&mut s.sub("conv1"), input, output, 3, stride, 1);
        let conv2 = Conv1d::new(&mut s.sub("conv2"), output, output, 3, 1, 1);
        let skip = (input != output || stride != 1)
            .then(|| Conv1d::new(&mut s.sub("skip"), input, output, 1, stride, 0));
        Self { conv1, conv2, skip }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, store, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let residual = match &self.skip {
            Some(c) => c.forward(g, store, x),
            None => x,
        };
        g.add(h, residual)
    }
}

/// LSTM parameters for one direction.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

/// `[h × k·h]` with each `[h × h]` block orthogonal.
fn orthogonal_blocks(rng: &mut impl Rng, hidden: usize, blocks: usize) -> Matrix {
    let parts: Vec<Matrix> = (0..blocks).map(|_| orthogonal(rng, hidden)).collect();
    Matrix::from_fn(hidden, blocks * hidden, |r, c| parts[c / hidden].get(r, c % hidden))
}

impl Lstm {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, input: usize, hidden: usize) -> Self {
        let w_ih = uniform_fan_in(s.rng, input, 4 * hidden, hidden);
        let w_hh = orthogonal_blocks(s.rng, hidden, 4);
        Self {
            w_ih: s.add("w_ih", w_ih, true),
            w_hh: s.add("w_hh", w_hh, true),
            b: s.add("b", Matrix::zeros(1, 4 * hidden), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Var {
        let (a, b, c) = (
            g.param(store, self.w_ih),
            g.param(store, self.w_hh),
            g.param(store, self.b),
        );
        g.lstm(x, a, b, c, reverse)
    }
}

#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl Gru {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, input: usize, hidden: usize) -> Self {
        let w_ih = uniform_fan_in(s.rng, input, 3 * hidden, hidden);
        let w_hh = orthogonal_blocks(s.rng, hidden, 3);
        Self {
            w_ih: s.add("w_ih", w_ih, true),
            w_hh: s.add("w_hh", w_hh, true),
            b_ih: s.add("b_ih", Matrix::zeros(1, 3 * hidden), true),
            b_hh: s.add("b_hh", Matrix::zeros(1, 3 * hidden), true),
        }
    }

    pub fn forward_last(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let ids = [self.w_ih, self.w_hh, self.b_ih, self.b_hh];
        let [a, b, c, d] = ids.map(|id| g.param(store, id));
        g.gru_last(x, a, b, c, d)
    }
}

/// Standard sinusoidal absolute positions, `[T × D]`.
pub fn sinusoidal_positions(frames: usize, width: usize) -> Matrix {
    Matrix::from_fn(frames, width, |t, j| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / width as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ff_multiplier: usize,
}

impl ConformerConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            blocks: 3,
            heads: 4,
            conv_kernel: 7,
            ff_multiplier: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(s: &mut Scope<'_, R>, width: usize, inner: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut s.sub("norm"), width),
            up: Linear::new(&mut s.sub("up"), width, inner),
            down: Linear::new(&mut s.sub("down"), inner, width),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(g, store, x);
        let h = self.up.forward(g, store, h);
        let h = g.silu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise_w: ParamId,
    depthwise_b: ParamId,
    inner_norm: LayerNorm,
    pointwise_out: Linear,
}

impl ConvModule {
    fn new<R: Rng>(s: &mut Scope<'_, R>, width: usize, kernel: usize) -> Self {
        let dw = uniform_fan_in(s.rng, kernel, width, kernel);
        let db = uniform_fan_in(s.rng, 1, width, kernel);
        Self {
            norm: LayerNorm::new(&mut s.sub("norm"), width),
            pointwise_in: Linear::new(&mut s.sub("pointwise_in"), width, 2 * width),
            depthwise_w: s.add("depthwise.w", dw, true),
            depthwise_b: s.add("depthwise.b", db, true),
            inner_norm: LayerNorm::new(&mut s.sub("inner_norm"), width),
            pointwise_out: Linear::new(&mut s.sub("pointwise_out"), width, width),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(g, store, x);
        let h = self.pointwise_in.forward(g, store, h);
        let h = g.glu(h);
        let (w, b) = (g.param(store, self.depthwise_w), g.param(store, self.depthwise_b));
        let h = g.depthwise_conv1d(h, w, b);
        let h = self.inner_norm.forward(g, store, h);
        let h = g.silu(h);
        self.pointwise_out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct ConformerBlock {
    ff1: FeedForward,
    attn_norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    conv: ConvModule,
    ff2: FeedForward,
    out_norm: LayerNorm,
    heads: usize,
}

impl ConformerBlock {
    fn new<R: Rng>(s: &mut Scope<'_, R>, cfg: &ConformerConfig) -> Self {
        let h = cfg.width;
        Self {
            ff1: FeedForward::new(&mut s.sub("ff1"), h, cfg.ff_multiplier * h),
            attn_norm: LayerNorm::new(&mut s.sub("attn_norm"), h),
            query: Linear::new(&mut s.sub("query"), h, h),
            key: Linear::new(&mut s.sub("key"), h, h),
            value: Linear::new(&mut s.sub("value"), h, h),
            attn_out: Linear::new(&mut s.sub("attn_out"), h, h),
            conv: ConvModule::new(&mut s.sub("conv"), h, cfg.conv_kernel),
            ff2: FeedForward::new(&mut s.sub("ff2"), h, cfg.ff_multiplier * h),
            out_norm: LayerNorm::new(&mut s.sub("out_norm"), h),
            heads: cfg.heads,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let f = self.ff1.forward(g, store, x);
        let f = g.scale(f, 0.5);
        let x = g.add(x, f);

        let h = self.attn_norm.forward(g, store, x);
        let q = self.query.forward(g, store, h);
        let k = self.key.forward(g, store, h);
        let v = self.value.forward(g, store, h);
        let a = g.attention(q, k, v, self.heads);
        let a = self.attn_out.forward(g, store, a);
        let x = g.add(x, a);

        let c = self.conv.forward(g, store, x);
        let x = g.add(x, c);

        let f = self.ff2.forward(g, store, x);
        let f = g.scale(f, 0.5);
        let x = g.add(x, f);
        self.out_norm.forward(g, store, x)
    }
}

/// A stack of Conformer blocks preceded by sinusoidal position encoding.
#[derive(Clone, Debug)]
pub struct Conformer {
    blocks: Vec<ConformerBlock>,
    pub config: ConformerConfig,
}

impl Conformer {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, cfg: ConformerConfig) -> Self {
        assert!(cfg.width % cfg.heads == 0, "width must split across heads");
        assert!(cfg.width % 2 == 0, "width must be even");
        let blocks = (0..cfg.blocks)
            .map(|i| ConformerBlock::new(&mut s.sub(&format!("block{i}")), &cfg))
            .collect();
        Self { blocks, config: cfg }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `x: [T × width]` → `[T × width]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let t = g.shape(x).0;
        let pos = g.constant(sinusoidal_positions(t, self.config.width));
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, store, x);
        }
        x
    }
}
