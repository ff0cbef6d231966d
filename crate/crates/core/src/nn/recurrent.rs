//! Fused LSTM and GRU layers with backpropagation through time.

use super::gemm::gemm;
use super::graph::{Graph, Var};
use super::ops::sigmoid;
use crate::matrix::Matrix;

/// `out += v · w` for a row vector `v` and row-major `w: [v.len() × out.len()]`.
fn vecmat_acc(v: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += vi * wv;
        }
    }
}

/// `out += w · v` for `w: [out.len() × v.len()]` (i.e. `v · wᵀ`).
fn matvec_acc(w: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (o, row) in out.iter_mut().zip(w.chunks(n)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `x · w + b` as a flat row-major buffer.
fn input_projection(x: &Matrix, w: &Matrix, b: &Matrix) -> Vec<f64> {
    let (t, n) = (x.rows(), w.cols());
    let mut out = Vec::with_capacity(t * n);
    for _ in 0..t {
        out.extend_from_slice(b.data());
    }
    gemm(t, x.cols(), n, x.data(), false, w.data(), false, &mut out, 1.0);
    out
}

/// Gradients of the shared input projection given `d(pre)`.
fn input_projection_backward(
    grads: &mut super::graph::Grads,
    (x, w, b): (Var, Var, Var),
    (xv, wv): (&Matrix, &Matrix),
    dpre: &[f64],
) {
    let (t, k, n) = (xv.rows(), xv.cols(), wv.cols());
    if let Some(s) = grads.slot(w) {
        gemm(k, t, n, xv.data(), true, dpre, false, s.data_mut(), 1.0);
    }
    if let Some(s) = grads.slot(b) {
        for row in dpre.chunks(n) {
            for (acc, v) in s.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    if let Some(s) = grads.slot(x) {
        gemm(t, n, k, dpre, false, wv.data(), true, s.data_mut(), 1.0);
    }
}

impl Graph {
    /// Unidirectional LSTM returning every hidden state, `[T × H]`.
    ///
    /// Gate layout along columns is input, forget, cell, output.
    /// `w_ih: [In × 4H]`, `w_hh: [H × 4H]`, `b: [1 × 4H]`. With `reverse`
    /// the sequence is consumed from the last frame to the first.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Var {
        let (xv, wih, whh, bv) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(b));
        let t = xv.rows();
        let h = whh.rows();
        let g4 = 4 * h;
        assert_eq!(wih.shape(), (xv.cols(), g4), "lstm input weight shape");
        assert_eq!(whh.shape(), (h, g4), "lstm recurrent weight shape");
        let pre = input_projection(xv, wih, bv);
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        let mut gates = vec![0.0; t * g4];
        let mut cells = vec![0.0; t * h];
        let mut hs = vec![0.0; t * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for &s in &order {
            let z = &mut gates[s * g4..(s + 1) * g4];
            z.copy_from_slice(&pre[s * g4..(s + 1) * g4]);
            vecmat_acc(&h_prev, whh.data(), z);
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                z[j] = i;
                z[h + j] = f;
                z[2 * h + j] = g;
                z[3 * h + j] = o;
                let c = f * c_prev[j] + i * g;
                cells[s * h + j] = c;
                hs[s * h + j] = o * c.tanh();
            }
            h_prev.copy_from_slice(&hs[s * h..(s + 1) * h]);
            c_prev.copy_from_slice(&cells[s * h..(s + 1) * h]);
        }
        let out = Matrix::from_vec(t, h, hs);
        self.push(out, &[x, w_ih, w_hh, b], move |ctx, out, g, grads| {
            let (xv, wih, whh) = (ctx.value(x), ctx.value(w_ih), ctx.value(w_hh));
            let hs = ctx.value(out).data();
            let mut dpre = vec![0.0; t * g4];
            let mut dh_rec = vec![0.0; h];
            let mut dc_rec = vec![0.0; h];
            let zeros = vec![0.0; h];
            for (pos, &s) in order.iter().enumerate().rev() {
                let prev = if pos == 0 { None } else { Some(order[pos - 1]) };
                let c_prev = prev.map_or(&zeros[..], |p| &cells[p * h..(p + 1) * h]);
                let z = &gates[s * g4..(s + 1) * g4];
                let dz = &mut dpre[s * g4..(s + 1) * g4];
                for j in 0..h {
                    let (i, f, gg, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
                    let tc = cells[s * h + j].tanh();
                    let dh = g.get(s, j) + dh_rec[j];
                    let dc = dc_rec[j] + dh * o * (1.0 - tc * tc);
                    dz[j] = dc * gg * i * (1.0 - i);
                    dz[h + j] = dc * c_prev[j] * f * (1.0 - f);
                    dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                    dz[3 * h + j] = dh * tc * o * (1.0 - o);
                    dc_rec[j] = dc * f;
                }
                dh_rec.iter_mut().for_each(|v| *v = 0.0);
                matvec_acc(whh.data(), dz, &mut dh_rec);
                if let (Some(p), Some(sw)) = (prev, grads.slot(w_hh)) {
                    let hp = &hs[p * h..(p + 1) * h];
                    let sw = sw.data_mut();
                    for (r, &hv) in hp.iter().enumerate() {
                        for (acc, d) in sw[r * g4..(r + 1) * g4].iter_mut().zip(dz.iter()) {
                            *acc += hv * d;
                        }
                    }
                }
            }
            input_projection_backward(grads, (x, w_ih, b), (xv, wih), &dpre);
        })
    }

    /// GRU over the sequence, returning only the final hidden state `[1 × H]`.
    ///
    /// Gate layout is reset, update, candidate. `w_ih: [In × 3H]`,
    /// `w_hh: [H × 3H]`, biases `[1 × 3H]`.
    pub fn gru_last(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Var {
        let (xv, wih, whh) = (self.value(x), self.value(w_ih), self.value(w_hh));
        let (bih, bhh) = (self.value(b_ih), self.value(b_hh));
        let t = xv.rows();
        let h = whh.rows();
        let g3 = 3 * h;
        assert_eq!(wih.shape(), (xv.cols(), g3), "gru input weight shape");
        assert_eq!(whh.shape(), (h, g3), "gru recurrent weight shape");
        let pre = input_projection(xv, wih, bih);
        // Per step: r, z, n, and the recurrent candidate term h·W_hn + b_hn.
        let mut cache = vec![0.0; t * 4 * h];
        let mut states = vec![0.0; (t + 1) * h];
        for s in 0..t {
            let (done, rest) = states.split_at_mut((s + 1) * h);
            let hp = &done[s * h..];
            let mut rec = bhh.data().to_vec();
            vecmat_acc(hp, whh.data(), &mut rec);
            let a = &pre[s * g3..(s + 1) * g3];
            let c = &mut cache[s * 4 * h..(s + 1) * 4 * h];
            for j in 0..h {
                let r = sigmoid(a[j] + rec[j]);
                let z = sigmoid(a[h + j] + rec[h + j]);
                let n = (a[2 * h + j] + r * rec[2 * h + j]).tanh();
                c[j] = r;
                c[h + j] = z;
                c[2 * h + j] = n;
                c[3 * h + j] = rec[2 * h + j];
                rest[j] = (1.0 - z) * n + z * hp[j];
            }
        }
        let out = Matrix::from_vec(1, h, states[t * h..].to_vec());
        self.push(out, &[x, w_ih, w_hh, b_ih, b_hh], move |ctx, _, g, grads| {
            let (xv, wih, whh) = (ctx.value(x), ctx.value(w_ih), ctx.value(w_hh));
            let mut dpre = vec![0.0; t * g3];
            let mut dh = g.data().to_vec();
            let mut drec = vec![0.0; g3];
            for s in (0..t).rev() {
                let hp = &states[s * h..(s + 1) * h];
                let c = &cache[s * 4 * h..(s + 1) * 4 * h];
                let da = &mut dpre[s * g3..(s + 1) * g3];
                let mut dh_next = vec![0.0; h];
                for j in 0..h {
                    let (r, z, n, rn) = (c[j], c[h + j], c[2 * h + j], c[3 * h + j]);
                    let dn = dh[j] * (1.0 - z) * (1.0 - n * n);
                    let dz = dh[j] * (hp[j] - n) * z * (1.0 - z);
                    let dr = dn * rn * r * (1.0 - r);
                    dh_next[j] = dh[j] * z;
                    da[j] = dr;
                    da[h + j] = dz;
                    da[2 * h + j] = dn;
                    drec[j] = dr;
                    drec[h + j] = dz;
                    drec[2 * h + j] = dn * r;
                }
                matvec_acc(whh.data(), &drec, &mut dh_next);
                if let Some(sw) = grads.slot(w_hh) {
                    let sw = sw.data_mut();
                    for (row, &hv) in hp.iter().enumerate() {
                        for (acc, d) in sw[row * g3..(row + 1) * g3].iter_mut().zip(&drec) {
                            *acc += hv * d;
                        }
                    }
                }
                if let Some(sb) = grads.slot(b_hh) {
                    for (acc, d) in sb.data_mut().iter_mut().zip(&drec) {
                        *acc += d;
                    }
                }
                dh = dh_next;
            }
            input_projection_backward(grads, (x, w_ih, b_ih), (xv, wih), &dpre);
        })
    }
}
