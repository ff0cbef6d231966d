//! Adam optimizer over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter bias correction. Parameters that receive no
/// gradient in a step keep their moments and their step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<Moments>>,
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub step: u64,
    pub m: Matrix,
    pub v: Matrix,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            state: vec![None; store.len()],
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state[id.0].as_ref()
    }

    pub fn set_moments(&mut self, id: ParamId, moments: Moments) {
        self.state[id.0] = Some(moments);
    }

    /// Applies one update; updated values are rounded to `f32` by the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (id, g) in grads {
            let value = store.value(*id);
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                step: 0,
                m: Matrix::zeros(value.rows(), value.cols()),
                v: Matrix::zeros(value.rows(), value.cols()),
            });
            st.step += 1;
            let c1 = 1.0 - beta1.powi(st.step as i32);
            let c2 = 1.0 - beta2.powi(st.step as i32);
            let mut next = value.clone();
            for (((p, gv), m), v) in next
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            store.set(*id, next);
        }
    }
}
