//! Convolutions over channels-last feature maps (im2col + gemm).

use super::gemm::gemm;
use super::graph::{Graph, Var};
use crate::matrix::Matrix;

/// Output length of a strided, zero-padded convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= kernel, "input shorter than kernel");
    (len + 2 * pad - kernel) / stride + 1
}

/// Spatial geometry of a 2-D map stored as `[(H·W) × C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry2d {
    pub height: usize,
    pub width: usize,
}

/// Source row of each im2col entry, or `None` for padding.
fn im2col_index(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(out_h * out_w * kernel.0 * kernel.1);
    for oi in 0..out_h {
        for oj in 0..out_w {
            for ki in 0..kernel.0 {
                for kj in 0..kernel.1 {
                    let i = (oi * stride.0 + ki) as isize - pad.0 as isize;
                    let j = (oj * stride.1 + kj) as isize - pad.1 as isize;
                    let inside = i >= 0 && j >= 0 && (i as usize) < in_h && (j as usize) < in_w;
                    idx.push(inside.then(|| i as usize * in_w + j as usize));
                }
            }
        }
    }
    idx
}

impl Graph {
    /// Generic im2col convolution; `index` maps each (output, tap) to an input row.
    fn conv_im2col(&mut self, x: Var, w: Var, b: Var, out_rows: usize, index: Vec<Option<usize>>) -> Var {
        let xv = self.value(x);
        let cin = xv.cols();
        let (wv, bv) = (self.value(w), self.value(b));
        let taps = index.len() / out_rows;
        let kdim = taps * cin;
        assert_eq!(wv.rows(), kdim, "conv weight rows");
        let cout = wv.cols();
        assert_eq!(bv.shape(), (1, cout), "conv bias shape");
        let mut cols = vec![0.0; out_rows * kdim];
        for (slot, src) in index.iter().enumerate() {
            if let Some(r) = src {
                cols[slot * cin..(slot + 1) * cin].copy_from_slice(xv.row(*r));
            }
        }
        let mut out = Matrix::zeros(out_rows, cout);
        for r in 0..out_rows {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm(out_rows, kdim, cout, &cols, false, wv.data(), false, out.data_mut(), 1.0);
        if !self.is_recording() {
            cols = Vec::new();
        }
        self.push(out, &[x, w, b], move |ctx, _, g, grads| {
            if let Some(s) = grads.slot(w) {
                gemm(kdim, out_rows, cout, &cols, true, g.data(), false, s.data_mut(), 1.0);
            }
            if let Some(s) = grads.slot(b) {
                for r in 0..out_rows {
                    for (acc, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
            if grads.wants(x) {
                let wv = ctx.value(w);
                let mut dcols = vec![0.0; out_rows * kdim];
                gemm(out_rows, cout, kdim, g.data(), false, wv.data(), true, &mut dcols, 0.0);
                let s = grads.slot(x).unwrap();
                for (slot, src) in index.iter().enumerate() {
                    if let Some(r) = src {
                        for (acc, v) in s.row_mut(*r).iter_mut().zip(&dcols[slot * cin..(slot + 1) * cin]) {
                            *acc += v;
                        }
                    }
                }
            }
        })
    }

    /// 1-D convolution over time. `x: [T × Cin]`, `w: [(kernel·Cin) × Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let t = self.value(x).rows();
        let out = conv_out_len(t, kernel, stride, pad);
        let index = im2col_index(t, 1, out, 1, (kernel, 1), (stride, 1), (pad, 0));
        self.conv_im2col(x, w, b, out, index)
    }

    /// 2-D convolution on a `[(H·W) × Cin]` map with a square kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        geom: Geometry2d,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> (Var, Geometry2d) {
        assert_eq!(self.value(x).rows(), geom.height * geom.width, "conv2d geometry");
        let oh = conv_out_len(geom.height, kernel, stride, pad);
        let ow = conv_out_len(geom.width, kernel, stride, pad);
        let index = im2col_index(
            geom.height,
            geom.width,
            oh,
            ow,
            (kernel, kernel),
            (stride, stride),
            (pad, pad),
        );
        let y = self.conv_im2col(x, w, b, oh * ow, index);
        (y, Geometry2d { height: oh, width: ow })
    }

    /// Same-length depthwise convolution. `x: [T × C]`, `w: [kernel × C]`, odd kernel.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, c) = xv.shape();
        let kernel = wv.rows();
        assert!(kernel % 2 == 1 && wv.cols() == c, "depthwise kernel shape");
        assert_eq!(bv.shape(), (1, c));
        let half = (kernel / 2) as isize;
        let mut out = Matrix::zeros(t, c);
        for i in 0..t {
            let row = out.row_mut(i);
            row.copy_from_slice(bv.data());
            for k in 0..kernel {
                let src = i as isize + k as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let (xr, wr) = (xv.row(src as usize), wv.row(k));
                for j in 0..c {
                    row[j] += xr[j] * wr[j];
                }
            }
        }
        self.push(out, &[x, w, b], move |ctx, _, g, grads| {
            let (xv, wv) = (ctx.value(x), ctx.value(w));
            if let Some(s) = grads.slot(b) {
                for i in 0..t {
                    for (acc, v) in s.data_mut().iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
            }
            for k in 0..kernel {
                for i in 0..t {
                    let src = i as isize + k as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    if let Some(s) = grads.slot(w) {
                        let row = s.row_mut(k);
                        for j in 0..c {
                            row[j] += g.get(i, j) * xv.get(src, j);
                        }
                    }
                    if let Some(s) = grads.slot(x) {
                        let row = s.row_mut(src);
                        for j in 0..c {
                            row[j] += g.get(i, j) * wv.get(k, j);
                        }
                    }
                }
            }
        })
    }
}
