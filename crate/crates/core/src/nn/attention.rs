//! Fused scaled dot-product attention.

use super::gemm::gemm;
use super::graph::{Graph, Var};
use crate::matrix::Matrix;

fn columns(m: &Matrix, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.rows() * width);
    for r in 0..m.rows() {
        out.extend_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn add_columns(dst: &mut Matrix, start: usize, width: usize, src: &[f64]) {
    for r in 0..dst.rows() {
        for (d, s) in dst.row_mut(r)[start..start + width]
            .iter_mut()
            .zip(&src[r * width..(r + 1) * width])
        {
            *d += s;
        }
    }
}

fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

impl Graph {
    /// Multi-head attention over pre-projected inputs.
    ///
    /// `q: [Tq × D]`, `k: [Tk × D]`, `v: [Tk × Dv]`; both `D` and `Dv` are split
    /// evenly over `heads`. Returns `[Tq × Dv]` with heads side by side.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, dim) = qv.shape();
        let tk = kv.rows();
        let dv = vv.cols();
        assert_eq!(kv.cols(), dim, "attention key width");
        assert_eq!(vv.rows(), tk, "attention value length");
        assert!(dim % heads == 0 && dv % heads == 0, "attention head split");
        let (d, e) = (dim / heads, dv / heads);
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Matrix::zeros(tq, dv);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = columns(qv, h * d, d);
            let kh = columns(kv, h * d, d);
            let vh = columns(vv, h * e, e);
            let mut s = vec![0.0; tq * tk];
            gemm(tq, d, tk, &qh, false, &kh, true, &mut s, 0.0);
            s.iter_mut().for_each(|x| *x *= scale);
            softmax_rows(&mut s, tk);
            let mut oh = vec![0.0; tq * e];
            gemm(tq, tk, e, &s, false, &vh, false, &mut oh, 0.0);
            add_columns(&mut out, h * e, e, &oh);
            probs.push(s);
        }
        let record = self.is_recording();
        if !record {
            probs.clear();
        }
        self.push(out, &[q, k, v], move |ctx, _, g, grads| {
            let (qv, kv, vv) = (ctx.value(q), ctx.value(k), ctx.value(v));
            for (h, p) in probs.iter().enumerate() {
                let goh = columns(g, h * e, e);
                let vh = columns(vv, h * e, e);
                if grads.wants(v) {
                    let mut dvh = vec![0.0; tk * e];
                    gemm(tk, tq, e, p, true, &goh, false, &mut dvh, 0.0);
                    add_columns(grads.slot(v).unwrap(), h * e, e, &dvh);
                }
                if !(grads.wants(q) || grads.wants(k)) {
                    continue;
                }
                let mut ds = vec![0.0; tq * tk];
                gemm(tq, e, tk, &goh, false, &vh, true, &mut ds, 0.0);
                for (drow, prow) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                if grads.wants(q) {
                    let kh = columns(kv, h * d, d);
                    let mut dq = vec![0.0; tq * d];
                    gemm(tq, tk, d, &ds, false, &kh, false, &mut dq, 0.0);
                    add_columns(grads.slot(q).unwrap(), h * d, d, &dq);
                }
                if grads.wants(k) {
                    let qh = columns(qv, h * d, d);
                    let mut dk = vec![0.0; tk * d];
                    gemm(tk, tq, d, &ds, true, &qh, false, &mut dk, 0.0);
                    add_columns(grads.slot(k).unwrap(), h * d, d, &dk);
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, rand_matrix};
    use super::*;

    #[test]
    fn attention_gradients() {
        check_gradients(
            &[rand_matrix(5, 8, 1), rand_matrix(6, 8, 2), rand_matrix(6, 4, 3)],
            |g, x| g.attention(x[0], x[1], x[2], 2),
        );
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::inference();
        let q = g.constant(rand_matrix(3, 4, 4));
        let k = g.constant(rand_matrix(1, 4, 5));
        let vm = rand_matrix(1, 6, 6);
        let v = g.constant(vm.clone());
        let o = g.attention(q, k, v, 2);
        for r in 0..3 {
            for c in 0..6 {
                assert!((g.value(o).get(r, c) - vm.get(0, c)).abs() < 1e-12);
            }
        }
    }
}
