//! Fused scaled dot-product attention over several heads.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::Scalar;

impl<T: Scalar> Graph<T> {
    /// Multi-head attention on already-projected inputs.
    ///
    /// `q` is `[batch * sq, width]`, `k` and `v` are `[batch * sk, width]`;
    /// each head uses a contiguous `width / heads` slice of the feature axis.
    /// `mask`, when given, is `[batch, sq, sk]` with `true` marking allowed
    /// positions. Masked weights are exactly zero; a query row with no allowed
    /// key yields a zero output. Result is `[batch * sq, width]`.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (sq_shape, sk_shape, sv_shape) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq_shape.len() != 2 || sk_shape.len() != 2 || sk_shape != sv_shape || sq_shape[1] != sk_shape[1] {
            return Err(TensorError::Shape { op: "multi_head_attention", lhs: sq_shape, rhs: sk_shape });
        }
        let width = sq_shape[1];
        if heads == 0 || width % heads != 0 || batch == 0 || sq_shape[0] % batch != 0 || sk_shape[0] % batch != 0 {
            return Err(TensorError::Argument {
                op: "multi_head_attention",
                msg: format!("width {width}, heads {heads}, batch {batch} incompatible with {sq_shape:?}/{sk_shape:?}"),
            });
        }
        let (sq, sk) = (sq_shape[0] / batch, sk_shape[0] / batch);
        if let Some(m) = mask {
            if m.len() != batch * sq * sk {
                return Err(TensorError::Shape { op: "multi_head_attention", lhs: vec![batch, sq, sk], rhs: vec![m.len()] });
            }
        }
        let d = width / heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qv, kv, vv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        let mut probs = vec![T::zero(); batch * heads * sq * sk];
        let mut out = vec![T::zero(); batch * sq * width];
        let mut scores = vec![T::zero(); sq * sk];
        for b in 0..batch {
            for h in 0..heads {
                let qm = MatRef::new(&qv, b * sq * width + h * d, sq, d, width);
                let km = MatRef::new(&kv, b * sk * width + h * d, sk, d, width);
                gemm(scale, qm, km.t(), T::zero(), MatMut::dense(&mut scores, sq, sk));
                let p = &mut probs[((b * heads + h) * sq) * sk..((b * heads + h + 1) * sq) * sk];
                for i in 0..sq {
                    let allowed = |j: usize| mask.is_none_or(|m| m[(b * sq + i) * sk + j]);
                    let row = &scores[i * sk..(i + 1) * sk];
                    let max = (0..sk).filter(|&j| allowed(j)).map(|j| row[j].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let z: f64 = (0..sk).filter(|&j| allowed(j)).map(|j| (row[j].as_f64() - max).exp()).sum();
                    for j in 0..sk {
                        if allowed(j) {
                            p[i * sk + j] = T::of((row[j].as_f64() - max).exp() / z);
                        }
                    }
                }
                let vm = MatRef::new(&vv, b * sk * width + h * d, sk, d, width);
                let om = MatMut::new(&mut out, b * sq * width + h * d, sq, d, width);
                gemm(T::one(), MatRef::dense(p, sq, sk), vm, T::zero(), om);
            }
        }
        let op = Op::Attention { q: q.0, k: k.0, v: v.0, heads, batch, sq, sk, probs };
        self.push("multi_head_attention", vec![batch * sq, width], out, op, &[q.0, k.0, v.0])
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn back_attention(&mut self, q: usize, k: usize, v: usize, heads: usize, batch: usize, sq: usize, sk: usize, probs: &[T], g: &[T]) {
        let width = self.nodes[q].shape[1];
        let d = width / heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); sq * sk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[((b * heads + h) * sq) * sk..((b * heads + h + 1) * sq) * sk];
                let go = MatRef::new(g, b * sq * width + h * d, sq, d, width);
                let vm = MatRef::new(&vv, b * sk * width + h * d, sk, d, width);
                // dV = Pᵀ dO
                gemm(T::one(), MatRef::dense(p, sq, sk).t(), go, T::one(), MatMut::new(&mut dv, b * sk * width + h * d, sk, d, width));
                // dP = dO Vᵀ, then softmax backward into dS (stored in dp)
                gemm(T::one(), go, vm.t(), T::zero(), MatMut::dense(&mut dp, sq, sk));
                for i in 0..sq {
                    let row_p = &p[i * sk..(i + 1) * sk];
                    let row_d = &mut dp[i * sk..(i + 1) * sk];
                    let dot: f64 = row_p.iter().zip(row_d.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for (dd, &pp) in row_d.iter_mut().zip(row_p) {
                        *dd = T::of(pp.as_f64() * (dd.as_f64() - dot));
                    }
                }
                let qm = MatRef::new(&qv, b * sq * width + h * d, sq, d, width);
                let km = MatRef::new(&kv, b * sk * width + h * d, sk, d, width);
                gemm(scale, MatRef::dense(&dp, sq, sk), km, T::one(), MatMut::new(&mut dq, b * sq * width + h * d, sq, d, width));
                gemm(scale, MatRef::dense(&dp, sq, sk).t(), qm, T::one(), MatMut::new(&mut dk, b * sk * width + h * d, sk, d, width));
            }
        }
        self.acc(q, &dq);
        self.acc(k, &dk);
        self.acc(v, &dv);
    }
}
