//! Layer and batch normalization.

use super::graph::{Graph, Mode, StatUpdate, Var};
use super::params::{ParamId, ParamStore};
use crate::matrix::Matrix;

pub const NORM_EPS: f64 = 1e-5;

impl Graph {
    /// Per-row normalization with learned `[1 × C]` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        assert_eq!(gv.shape(), (1, c), "layer_norm gamma shape");
        let mut xhat = Matrix::zeros(t, c);
        let mut inv_std = vec![0.0; t];
        for r in 0..t {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = s;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let value = Matrix::from_fn(t, c, |r, j| xhat.get(r, j) * gv.get(0, j) + bv.get(0, j));
        self.push(value, &[x, gamma, beta], move |ctx, _, g, grads| {
            let gam = ctx.value(gamma);
            if let Some(s) = grads.slot(gamma) {
                for r in 0..t {
                    for j in 0..c {
                        s.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                    }
                }
            }
            if let Some(s) = grads.slot(beta) {
                for r in 0..t {
                    for (acc, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
            if let Some(s) = grads.slot(x) {
                let mut dxhat = vec![0.0; c];
                for r in 0..t {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dxhat[j] = gr[j] * gam.get(0, j);
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let out = s.row_mut(r);
                    for j in 0..c {
                        out[j] += inv_std[r] * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
            }
        })
    }

    /// Per-column normalization over all rows of `x`.
    ///
    /// In train mode the batch statistics are used and queued as a
    /// [`StatUpdate`]; in eval mode the running buffers are used.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut pending = None;
        let (mean, var) = match self.mode() {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased: Vec<f64> =
                    var.iter().map(|s| s / (n.max(2) - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= n as f64);
                pending = Some(StatUpdate {
                    running_mean,
                    running_var,
                    batch_mean: mean.clone(),
                    batch_var: unbiased,
                });
                (mean, var)
            }
            Mode::Eval => (
                store.read(running_mean).data().to_vec(),
                store.read(running_var).data().to_vec(),
            ),
        };
        let train = pending.is_some();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xhat = Matrix::from_fn(n, c, |r, j| (xv.get(r, j) - mean[j]) * inv_std[j]);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let value = Matrix::from_fn(n, c, |r, j| xhat.get(r, j) * gv.get(0, j) + bv.get(0, j));
        self.stat_updates.extend(pending);
        self.push(value, &[x, gamma, beta], move |ctx, _, g, grads| {
            let gam = ctx.value(gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for r in 0..n {
                for j in 0..c {
                    sum_g[j] += g.get(r, j);
                    sum_gx[j] += g.get(r, j) * xhat.get(r, j);
                }
            }
            if let Some(s) = grads.slot(gamma) {
                for (acc, v) in s.data_mut().iter_mut().zip(&sum_gx) {
                    *acc += v;
                }
            }
            if let Some(s) = grads.slot(beta) {
                for (acc, v) in s.data_mut().iter_mut().zip(&sum_g) {
                    *acc += v;
                }
            }
            if let Some(s) = grads.slot(x) {
                for r in 0..n {
                    let out = s.row_mut(r);
                    for j in 0..c {
                        let k = gam.get(0, j) * inv_std[j];
                        out[j] += if train {
                            k * (g.get(r, j)
                                - sum_g[j] / n as f64
                                - xhat.get(r, j) * sum_gx[j] / n as f64)
                        } else {
                            k * g.get(r, j)
                        };
                    }
                }
            }
        })
    }
}

/// Exponential moving update of running statistics.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        let mut m = store.value(u.running_mean).clone();
        for (r, b) in m.data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        store.set(u.running_mean, m);
        let mut v = store.value(u.running_var).clone();
        for (r, b) in v.data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        store.set(u.running_var, v);
    }
}
