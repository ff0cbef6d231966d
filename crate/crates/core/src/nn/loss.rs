//! Scalar losses.

use super::graph::{Graph, Var};
use crate::matrix::Matrix;

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

impl Graph {
    /// Mean cross-entropy of `logits: [B × C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (b, c) = lv.shape();
        assert_eq!(labels.len(), b, "one label per row");
        assert!(labels.iter().all(|&l| l < c), "label out of range");
        let probs = softmax(lv);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs.get(r, l).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        let labels = labels.to_vec();
        self.push(Matrix::scalar(loss), &[logits], move |_, _, g, grads| {
            if let Some(s) = grads.slot(logits) {
                let k = g.get(0, 0) / b as f64;
                for (r, &l) in labels.iter().enumerate() {
                    let row = s.row_mut(r);
                    for (j, acc) in row.iter_mut().enumerate() {
                        let target = if j == l { 1.0 } else { 0.0 };
                        *acc += k * (probs.get(r, j) - target);
                    }
                }
            }
        })
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let loss = self.value(a).mean_abs_diff(self.value(b));
        let n = self.value(a).len() as f64;
        self.push(Matrix::scalar(loss), &[a, b], move |ctx, _, g, grads| {
            let k = g.get(0, 0) / n;
            let (av, bv) = (ctx.value(a), ctx.value(b));
            let sign = |x: f64, y: f64| {
                if x > y {
                    k
                } else if x < y {
                    -k
                } else {
                    0.0
                }
            };
            if let Some(s) = grads.slot(a) {
                for ((acc, &x), &y) in s.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *acc += sign(x, y);
                }
            }
            if let Some(s) = grads.slot(b) {
                for ((acc, &x), &y) in s.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *acc -= sign(x, y);
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
    fn cross_entropy_gradients_and_value() {
        check_gradients(&[rand_matrix(4, 3, 1)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]));
        let mut g = Graph::inference();
        let l = g.constant(Matrix::zeros(2, 4));
        let ce = g.cross_entropy(l, &[1, 3]);
        assert!((g.value(ce).get(0, 0) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l1_gradients_and_value() {
        check_gradients(&[rand_matrix(3, 5, 2), rand_matrix(3, 5, 3)], |g, v| g.l1_loss(v[0], v[1]));
        let mut g = Graph::inference();
        let a = g.constant(Matrix::from_rows(&[vec![1.0, -1.0]]));
        let b = g.constant(Matrix::from_rows(&[vec![0.0, 1.0]]));
        let l = g.l1_loss(a, b);
        assert_eq!(g.value(l).get(0, 0), 1.5);
    }
}
