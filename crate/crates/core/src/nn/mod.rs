//! Reverse-mode automatic differentiation and the layers built on it.

mod attention;
mod conv;
pub(crate) mod gemm;
mod layers;
mod graph;
mod loss;
mod norm;
mod ops;
mod optim;
mod params;
mod recurrent;
#[cfg(test)]
pub(crate) mod testutil;

pub use conv::{conv_out_len, Geometry2d};
pub use graph::{Grads, Graph, Mode, StatUpdate, Var};
pub use loss::softmax;
pub use norm::{apply_stat_updates, NORM_EPS};
pub use optim::{Adam, AdamConfig, Moments};
pub use params::{normal, orthogonal, uniform_fan_in, ParamId, ParamStore};
pub use layers::{
    sinusoidal_positions, BatchNorm, Conformer, ConformerConfig, Conv1d, ConvResBlock, Gru,
    LayerNorm, Linear, Lstm, Scope, LEAKY_SLOPE,
};
