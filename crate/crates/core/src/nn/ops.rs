//! Elementwise, shape and dense ops.

use super::gemm::gemm;
use super::graph::{Graph, Var};
use crate::matrix::Matrix;

fn accumulate(slot: Option<&mut Matrix>, g: &Matrix) {
    if let Some(s) = slot {
        s.add_assign(g);
    }
}

impl Graph {
    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, &[a, b], move |ctx, _, g, grads| {
            let (av, bv) = (ctx.value(a), ctx.value(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(s) = grads.slot(a) {
                gemm(m, n, k, g.data(), false, bv.data(), true, s.data_mut(), 1.0);
            }
            if let Some(s) = grads.slot(b) {
                gemm(k, m, n, av.data(), true, g.data(), false, s.data_mut(), 1.0);
            }
        })
    }

    /// `x · w + b` with `w: [in × out]` and `b: [1 × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols(), wv.rows(), "linear input width");
        assert_eq!(bv.shape(), (1, wv.cols()), "linear bias shape");
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Matrix::zeros(m, n);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm(m, k, n, xv.data(), false, wv.data(), false, out.data_mut(), 1.0);
        self.push(out, &[x, w, b], move |ctx, _, g, grads| {
            let (xv, wv) = (ctx.value(x), ctx.value(w));
            if let Some(s) = grads.slot(x) {
                gemm(m, n, k, g.data(), false, wv.data(), true, s.data_mut(), 1.0);
            }
            if let Some(s) = grads.slot(w) {
                gemm(k, m, n, xv.data(), true, g.data(), false, s.data_mut(), 1.0);
            }
            if let Some(s) = grads.slot(b) {
                for r in 0..m {
                    for (acc, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, &[a, b], move |_, _, g, grads| {
            accumulate(grads.slot(a), g);
            accumulate(grads.slot(b), g);
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, &[a, b], move |_, _, g, grads| {
            accumulate(grads.slot(a), g);
            if let Some(s) = grads.slot(b) {
                for (acc, v) in s.data_mut().iter_mut().zip(g.data()) {
                    *acc -= v;
                }
            }
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, &[a, b], move |ctx, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                let bv = ctx.value(b);
                for ((acc, gv), y) in s.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *acc += gv * y;
                }
            }
            if let Some(s) = grads.slot(b) {
                let av = ctx.value(a);
                for ((acc, gv), x) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *acc += gv * x;
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, &[a], move |_, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                for (acc, v) in s.data_mut().iter_mut().zip(g.data()) {
                    *acc += factor * v;
                }
            }
        })
    }

    /// Adds a `[1 × C]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row shape");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *v += b;
            }
        }
        self.push(value, &[a, row], move |_, _, g, grads| {
            accumulate(grads.slot(a), g);
            if let Some(s) = grads.slot(row) {
                for r in 0..g.rows() {
                    for (acc, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
        })
    }

    /// Applies `f` elementwise with derivative `df(x, y)` given input and output.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        self.push(value, &[a], move |ctx, out, g, grads| {
            let (x, y) = (ctx.value(a), ctx.value(out));
            if let Some(s) = grads.slot(a) {
                for (((acc, gv), &xv), &yv) in
                    s.data_mut().iter_mut().zip(g.data()).zip(x.data()).zip(y.data())
                {
                    *acc += gv * df(xv, yv);
                }
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let sig = self.value(a).map(sigmoid);
        let value = self.value(a).zip_map(&sig, |x, s| x * s);
        self.push(value, &[a], move |ctx, _, g, grads| {
            let x = ctx.value(a);
            if let Some(acc) = grads.slot(a) {
                for (((acc, gv), &xv), &s) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()).zip(sig.data()) {
                    *acc += gv * s * (1.0 + xv * (1.0 - s));
                }
            }
        })
    }

    /// Gated linear unit over columns: `left ⊙ sigmoid(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.cols() % 2 == 0, "glu needs an even width");
        let half = av.cols() / 2;
        let sig = Matrix::from_fn(av.rows(), half, |r, c| sigmoid(av.get(r, c + half)));
        let value = Matrix::from_fn(av.rows(), half, |r, c| av.get(r, c) * sig.get(r, c));
        self.push(value, &[a], move |ctx, _, g, grads| {
            let av = ctx.value(a);
            if let Some(s) = grads.slot(a) {
                for r in 0..g.rows() {
                    let (x, row, sg, gr) = (av.row(r), s.row_mut(r), sig.row(r), g.row(r));
                    for c in 0..half {
                        row[c] += gr[c] * sg[c];
                        row[c + half] += gr[c] * x[c] * sg[c] * (1.0 - sg[c]);
                    }
                }
            }
        })
    }

    /// Horizontal concatenation of equal-height inputs.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols height");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let parts = parts.to_vec();
        self.push(value, &parts.clone(), move |_, _, g, grads| {
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if let Some(s) = grads.slot(p) {
                    for r in 0..rows {
                        for (acc, v) in s.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                            *acc += v;
                        }
                    }
                }
                offset += w;
            }
        })
    }

    /// Vertical concatenation of equal-width inputs.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let heights: Vec<usize> = parts.iter().map(|&p| self.value(p).rows()).collect();
        let mut data = Vec::with_capacity(heights.iter().sum::<usize>() * cols);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width");
            data.extend_from_slice(pv.data());
        }
        let value = Matrix::from_vec(heights.iter().sum(), cols, data);
        let parts = parts.to_vec();
        self.push(value, &parts.clone(), move |_, _, g, grads| {
            let mut offset = 0;
            for (&p, &h) in parts.iter().zip(&heights) {
                if let Some(s) = grads.slot(p) {
                    let src = &g.data()[offset * cols..(offset + h) * cols];
                    for (acc, v) in s.data_mut().iter_mut().zip(src) {
                        *acc += v;
                    }
                }
                offset += h;
            }
        })
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        self.push(value, &[a], move |_, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                let cols = g.cols();
                let dst = &mut s.data_mut()[start * cols..(start + len) * cols];
                for (acc, v) in dst.iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        })
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let value = Matrix::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        self.push(value, &[a], move |_, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                for r in 0..g.rows() {
                    for (acc, v) in s.row_mut(r)[start..start + len].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
        })
    }

    /// Repeats a `[1 × C]` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "broadcast_rows expects a single row");
        let cols = rv.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(rv.data());
        }
        let value = Matrix::from_vec(rows, cols, data);
        self.push(value, &[row], move |_, _, g, grads| {
            if let Some(s) = grads.slot(row) {
                for r in 0..g.rows() {
                    for (acc, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
        })
    }

    /// Extends `a` to `rows` rows by repeating its last row.
    pub fn pad_repeat_last(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        let (t, cols) = av.shape();
        assert!(t >= 1 && rows >= t, "pad_repeat_last target");
        if rows == t {
            return a;
        }
        let mut data = av.data().to_vec();
        let last = av.row(t - 1).to_vec();
        for _ in t..rows {
            data.extend_from_slice(&last);
        }
        let value = Matrix::from_vec(rows, cols, data);
        self.push(value, &[a], move |_, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                for r in 0..g.rows() {
                    let dst = s.row_mut(r.min(t - 1));
                    for (acc, v) in dst.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
        })
    }

    /// Same data in row-major order, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        self.push(value, &[a], move |_, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                for (acc, v) in s.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        })
    }

    /// Column means as a `[1 × C]` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (t, cols) = av.shape();
        let mut value = Matrix::zeros(1, cols);
        for r in 0..t {
            for (acc, v) in value.data_mut().iter_mut().zip(av.row(r)) {
                *acc += v;
            }
        }
        value.scale_assign(1.0 / t as f64);
        self.push(value, &[a], move |_, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                for r in 0..t {
                    for (acc, v) in s.row_mut(r).iter_mut().zip(g.data()) {
                        *acc += v / t as f64;
                    }
                }
            }
        })
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, &[a], move |_, _, g, grads| {
            let gv = g.get(0, 0);
            if let Some(s) = grads.slot(a) {
                s.data_mut().iter_mut().for_each(|acc| *acc += gv);
            }
        })
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Identity forward; multiplies the gradient by `-lambda` backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let value = self.value(a).clone();
        self.push(value, &[a], move |_, _, g, grads| {
            if let Some(s) = grads.slot(a) {
                for (acc, v) in s.data_mut().iter_mut().zip(g.data()) {
                    *acc -= lambda * v;
                }
            }
        })
    }

    /// Cuts the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, rand_matrix};
    use super::*;

    #[test]
    fn matmul_and_linear_gradients() {
        check_gradients(&[rand_matrix(3, 4, 1), rand_matrix(4, 2, 2)], |g, v| g.matmul(v[0], v[1]));
        check_gradients(
            &[rand_matrix(3, 4, 1), rand_matrix(4, 2, 2), rand_matrix(1, 2, 3)],
            |g, v| g.linear(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn elementwise_gradients() {
        let ins = [rand_matrix(3, 4, 5), rand_matrix(3, 4, 6)];
        check_gradients(&ins, |g, v| g.add(v[0], v[1]));
        check_gradients(&ins, |g, v| g.sub(v[0], v[1]));
        check_gradients(&ins, |g, v| g.mul(v[0], v[1]));
        check_gradients(&ins[..1], |g, v| g.scale(v[0], -2.5));
        check_gradients(&[rand_matrix(3, 4, 5), rand_matrix(1, 4, 7)], |g, v| g.add_row(v[0], v[1]));
    }

    #[test]
    fn activation_gradients() {
        let x = [rand_matrix(4, 6, 8)];
        check_gradients(&x, |g, v| g.relu(v[0]));
        check_gradients(&x, |g, v| g.leaky_relu(v[0], 0.2));
        check_gradients(&x, |g, v| g.sigmoid(v[0]));
        check_gradients(&x, |g, v| g.tanh(v[0]));
        check_gradients(&x, |g, v| g.silu(v[0]));
        check_gradients(&x, |g, v| g.glu(v[0]));
    }

    #[test]
    fn shape_gradients() {
        let a = rand_matrix(3, 2, 9);
        let b = rand_matrix(3, 5, 10);
        check_gradients(&[a.clone(), b.clone()], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
        check_gradients(&[a.clone(), rand_matrix(4, 2, 11)], |g, v| g.concat_rows(&[v[0], v[1]]));
        check_gradients(&[b.clone()], |g, v| g.slice_rows(v[0], 1, 2));
        check_gradients(&[b.clone()], |g, v| g.slice_cols(v[0], 1, 3));
        check_gradients(&[rand_matrix(1, 4, 12)], |g, v| g.broadcast_rows(v[0], 5));
        check_gradients(&[b.clone()], |g, v| g.pad_repeat_last(v[0], 7));
        check_gradients(&[b.clone()], |g, v| g.reshape(v[0], 5, 3));
        check_gradients(&[b.clone()], |g, v| g.mean_rows(v[0]));
        check_gradients(&[b], |g, v| g.sum_all(v[0]));
    }

    #[test]
    fn grl_is_identity_forward_and_negated_backward() {
        let x = rand_matrix(3, 3, 13);
        let mut g = Graph::training();
        let a = g.variable(x.clone());
        let y = g.grl(a, 0.7);
        assert!(g.value(y).bits_eq(&x));
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(a).data().iter().all(|&v| v == -0.7));
    }

    #[test]
    fn pad_repeat_last_copies_final_row() {
        let mut g = Graph::inference();
        let a = g.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.pad_repeat_last(a, 4);
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }
}
