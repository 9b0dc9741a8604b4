//! Convolution, pooling, normalisation and dropout.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::Scalar;

/// Output length of an unpadded convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

/// Batch-norm running statistics consumed in evaluation mode.
#[derive(Clone, Copy, Debug)]
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

/// Running statistics after a training-mode batch-norm step.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdatedStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Fills `cols` (`[cin * kernel, lout]`) from one `[cin, len]` sample.
fn im2col<T: Scalar>(x: &[T], cin: usize, len: usize, kernel: usize, stride: usize, lout: usize, cols: &mut [T]) {
    for c in 0..cin {
        for kk in 0..kernel {
            let row = &mut cols[(c * kernel + kk) * lout..(c * kernel + kk + 1) * lout];
            for (t, dst) in row.iter_mut().enumerate() {
                *dst = x[c * len + t * stride + kk];
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// 1-D convolution without padding: `x [B, Cin, L]`, `w [Cout, Cin, K]`,
    /// optional bias `[Cout]`; result `[B, Cout, ⌊(L−K)/stride⌋+1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return Err(TensorError::Shape { op: "conv1d", lhs: sx, rhs: sw });
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, kernel) = (sw[0], sw[2]);
        let lout = conv1d_out_len(len, kernel, stride);
        if lout == 0 {
            return Err(TensorError::Argument { op: "conv1d", msg: format!("input length {len} shorter than kernel {kernel}") });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::Shape { op: "conv1d", lhs: vec![cout], rhs: self.shape(b).to_vec() });
            }
        }
        let (xv, wv) = (self.val(x.0), self.val(w.0));
        let bv = b.map(|b| self.val(b.0));
        let ck = cin * kernel;
        let mut cols = vec![T::zero(); ck * lout];
        let mut out = vec![T::zero(); batch * cout * lout];
        for n in 0..batch {
            im2col(&xv[n * cin * len..(n + 1) * cin * len], cin, len, kernel, stride, lout, &mut cols);
            let y = &mut out[n * cout * lout..(n + 1) * cout * lout];
            if let Some(bv) = &bv {
                for (o, row) in y.chunks_mut(lout).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[o]);
                }
            }
            gemm(T::one(), MatRef::dense(&wv, cout, ck), MatRef::dense(&cols, ck, lout), T::one(), MatMut::dense(y, cout, lout));
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push("conv1d", vec![batch, cout, lout], out, Op::Conv1d { x: x.0, w: w.0, b: b.map(|b| b.0), stride }, &parents)
    }

    pub(crate) fn back_conv1d(&mut self, x: usize, w: usize, b: Option<usize>, stride: usize, out: usize, g: &[T]) {
        let (batch, cin, len) = (self.nodes[x].shape[0], self.nodes[x].shape[1], self.nodes[x].shape[2]);
        let (cout, kernel) = (self.nodes[w].shape[0], self.nodes[w].shape[2]);
        let lout = self.nodes[out].shape[2];
        let ck = cin * kernel;
        let (xv, wv) = (self.val(x), self.val(w));
        if let Some(b) = b {
            if let Some(db) = self.grad_buf(b) {
                for n in 0..batch {
                    for o in 0..cout {
                        let row = &g[(n * cout + o) * lout..(n * cout + o + 1) * lout];
                        db[o] += row.iter().copied().sum::<T>();
                    }
                }
            }
        }
        let mut cols = vec![T::zero(); ck * lout];
        if self.needs(w) {
            let mut dw = vec![T::zero(); cout * ck];
            for n in 0..batch {
                im2col(&xv[n * cin * len..(n + 1) * cin * len], cin, len, kernel, stride, lout, &mut cols);
                let gy = MatRef::dense(&g[n * cout * lout..(n + 1) * cout * lout], cout, lout);
                gemm(T::one(), gy, MatRef::dense(&cols, ck, lout).t(), T::one(), MatMut::dense(&mut dw, cout, ck));
            }
            self.acc(w, &dw);
        }
        if let Some(dx) = self.grad_buf(x) {
            for n in 0..batch {
                let gy = MatRef::dense(&g[n * cout * lout..(n + 1) * cout * lout], cout, lout);
                gemm(T::one(), MatRef::dense(&wv, cout, ck).t(), gy, T::zero(), MatMut::dense(&mut cols, ck, lout));
                let dxn = &mut dx[n * cin * len..(n + 1) * cin * len];
                for c in 0..cin {
                    for kk in 0..kernel {
                        let row = &cols[(c * kernel + kk) * lout..(c * kernel + kk + 1) * lout];
                        for (t, &v) in row.iter().enumerate() {
                            dxn[c * len + t * stride + kk] += v;
                        }
                    }
                }
            }
        }
    }

    /// Max pooling over the last axis with stride equal to `width`; trailing
    /// samples that do not fill a window are dropped.
    pub fn maxpool1d(&mut self, x: Var, width: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || width == 0 {
            return Err(TensorError::Argument { op: "maxpool1d", msg: format!("width {width} on shape {sx:?}") });
        }
        let len = *sx.last().unwrap();
        let lout = len / width;
        let rows = sx.iter().product::<usize>() / len.max(1);
        let xv = self.val(x.0);
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            for t in 0..lout {
                let start = r * len + t * width;
                let (mut best, mut best_v) = (start, xv[start]);
                for i in start + 1..start + width {
                    if xv[i] > best_v {
                        best = i;
                        best_v = xv[i];
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = lout;
        self.push("maxpool1d", shape, out, Op::MaxPool1d { x: x.0, argmax }, &[x.0])
    }

    /// Batch normalisation over `[B, C]` or `[B, C, L]` per channel `C`.
    ///
    /// In training mode normalises with batch statistics and returns the
    /// running statistics updated with momentum [`BATCHNORM_MOMENTUM`]; in
    /// evaluation mode normalises with `running`.
    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, running: RunningStats<'_, T>) -> Result<(Var, Option<UpdatedStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || sx.len() > 3 {
            return Err(TensorError::Shape { op: "batchnorm1d", lhs: sx, rhs: self.shape(gamma).to_vec() });
        }
        let (batch, ch) = (sx[0], sx[1]);
        let len = if sx.len() == 3 { sx[2] } else { 1 };
        for v in [gamma, beta] {
            if self.shape(v) != [ch] {
                return Err(TensorError::Shape { op: "batchnorm1d", lhs: vec![ch], rhs: self.shape(v).to_vec() });
            }
        }
        if running.mean.len() != ch || running.var.len() != ch {
            return Err(TensorError::Shape { op: "batchnorm1d", lhs: vec![ch], rhs: vec![running.mean.len()] });
        }
        let xv = self.val(x.0);
        let (gv, bv) = (self.val(gamma.0), self.val(beta.0));
        let at = |n: usize, c: usize, l: usize| (n * ch + c) * len + l;
        let count = (batch * len) as f64;
        let training = self.is_training();
        let mut mean = vec![0.0f64; ch];
        let mut var = vec![0.0f64; ch];
        if training {
            for c in 0..ch {
                let mut s = 0.0;
                for n in 0..batch {
                    for l in 0..len {
                        s += xv[at(n, c, l)].as_f64();
                    }
                }
                mean[c] = s / count;
                let mut ss = 0.0;
                for n in 0..batch {
                    for l in 0..len {
                        let d = xv[at(n, c, l)].as_f64() - mean[c];
                        ss += d * d;
                    }
                }
                var[c] = ss / count;
            }
        } else {
            for c in 0..ch {
                mean[c] = running.mean[c].as_f64();
                var[c] = running.var[c].as_f64();
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..batch {
            for c in 0..ch {
                for l in 0..len {
                    let i = at(n, c, l);
                    let h = (xv[i].as_f64() - mean[c]) * inv_std[c];
                    xhat[i] = T::of(h);
                    out[i] = T::of(h * gv[c].as_f64() + bv[c].as_f64());
                }
            }
        }
        let updated = training.then(|| {
            let m = BATCHNORM_MOMENTUM;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            UpdatedStats {
                mean: (0..ch).map(|c| T::of((1.0 - m) * running.mean[c].as_f64() + m * mean[c])).collect(),
                var: (0..ch).map(|c| T::of((1.0 - m) * running.var[c].as_f64() + m * var[c] * unbias)).collect(),
            }
        });
        let op = Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, training };
        let v = self.push("batchnorm1d", sx, out, op, &[x.0, gamma.0, beta.0])?;
        Ok((v, updated))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn back_batchnorm(&mut self, x: usize, gamma: usize, beta: usize, xhat: &[T], inv_std: &[f64], training: bool, g: &[T]) {
        let sx = self.nodes[x].shape.clone();
        let (batch, ch) = (sx[0], sx[1]);
        let len = if sx.len() == 3 { sx[2] } else { 1 };
        let at = |n: usize, c: usize, l: usize| (n * ch + c) * len + l;
        let gv = self.val(gamma);
        let mut dgamma = vec![0.0f64; ch];
        let mut dbeta = vec![0.0f64; ch];
        for n in 0..batch {
            for c in 0..ch {
                for l in 0..len {
                    let i = at(n, c, l);
                    dgamma[c] += g[i].as_f64() * xhat[i].as_f64();
                    dbeta[c] += g[i].as_f64();
                }
            }
        }
        if let Some(dx) = self.grad_buf(x) {
            let count = (batch * len) as f64;
            for c in 0..ch {
                let gam = gv[c].as_f64();
                // Σ dxhat and Σ dxhat·xhat over the channel
                let (sum_d, sum_dx) = (dbeta[c] * gam, dgamma[c] * gam);
                for n in 0..batch {
                    for l in 0..len {
                        let i = at(n, c, l);
                        let dxh = g[i].as_f64() * gam;
                        let v = if training {
                            inv_std[c] / count * (count * dxh - sum_d - xhat[i].as_f64() * sum_dx)
                        } else {
                            dxh * inv_std[c]
                        };
                        dx[i] += T::of(v);
                    }
                }
            }
        }
        if let Some(dg) = self.grad_buf(gamma) {
            dg.iter_mut().zip(&dgamma).for_each(|(d, &v)| *d += T::of(v));
        }
        if let Some(db) = self.grad_buf(beta) {
            db.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += T::of(v));
        }
    }

    /// Layer normalisation over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let width = *sx.last().unwrap_or(&0);
        for v in [gamma, beta] {
            if self.shape(v) != [width] {
                return Err(TensorError::Shape { op: "layernorm", lhs: sx.clone(), rhs: self.shape(v).to_vec() });
            }
        }
        let xv = self.val(x.0);
        let (gv, bv) = (self.val(gamma.0), self.val(beta.0));
        let rows = xv.len() / width.max(1);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..width {
                let h = (row[j].as_f64() - mean) * is;
                xhat[r * width + j] = T::of(h);
                out[r * width + j] = T::of(h * gv[j].as_f64() + bv[j].as_f64());
            }
        }
        let op = Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std };
        self.push("layernorm", sx, out, op, &[x.0, gamma.0, beta.0])
    }

    pub(crate) fn back_layernorm(&mut self, x: usize, gamma: usize, beta: usize, xhat: &[T], inv_std: &[f64], g: &[T]) {
        let width = *self.nodes[x].shape.last().unwrap();
        let rows = xhat.len() / width.max(1);
        let gv = self.val(gamma);
        if self.needs(x) {
            let mut dx = vec![T::zero(); xhat.len()];
            let w = width as f64;
            for r in 0..rows {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..width {
                    let d = g[r * width + j].as_f64() * gv[j].as_f64();
                    sum_d += d;
                    sum_dx += d * xhat[r * width + j].as_f64();
                }
                for j in 0..width {
                    let i = r * width + j;
                    let d = g[i].as_f64() * gv[j].as_f64();
                    dx[i] = T::of(inv_std[r] / w * (w * d - sum_d - xhat[i].as_f64() * sum_dx));
                }
            }
            self.acc(x, &dx);
        }
        if let Some(dg) = self.grad_buf(gamma) {
            for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                dg[i % width] += gi * h;
            }
        }
        if let Some(db) = self.grad_buf(beta) {
            for (i, &gi) in g.iter().enumerate() {
                db[i % width] += gi;
            }
        }
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Argument { op: "dropout", msg: format!("probability {p} outside [0, 1)") });
        }
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x: x.0, mask }, &[x.0])
    }
}
