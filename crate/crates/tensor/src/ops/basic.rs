//! Shape-generic arithmetic, layout and reduction operators.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::Scalar;

/// How a loss is reduced over its contributing rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// `(outer, len, inner)` such that `shape == outer × len × inner` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

impl<T: Scalar> Graph<T> {
    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(TensorError::Argument { op, msg: format!("axis {axis} out of range for rank {rank}") });
        }
        Ok(())
    }

    /// `a @ b` where `a` is `[..., k]` and `b` is `[k, n]`; result `[..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa.iter().product::<usize>() / k.max(1);
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), MatRef::dense(&av, m, k), MatRef::dense(&bv, k, n), T::zero(), MatMut::dense(&mut out, m, n));
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", shape, out, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub(crate) fn back_matmul(&mut self, a: usize, b: usize, _out: usize, g: &[T]) {
        let k = self.nodes[b].shape[0];
        let n = self.nodes[b].shape[1];
        let m = self.nodes[a].value.len() / k.max(1);
        let (av, bv) = (self.val(a), self.val(b));
        if let Some(da) = self.grad_buf(a) {
            gemm(T::one(), MatRef::dense(g, m, n), MatRef::dense(&bv, k, n).t(), T::one(), MatMut::dense(da, m, k));
        }
        if let Some(db) = self.grad_buf(b) {
            gemm(T::one(), MatRef::dense(&av, m, k).t(), MatRef::dense(g, m, n), T::one(), MatMut::dense(db, k, n));
        }
    }

    /// Elementwise `a + b`; `b`'s shape must equal `a`'s or be a suffix of it
    /// (broadcast over the leading dimensions).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sa, &sb) {
            return Err(TensorError::Shape { op: "add", lhs: sa, rhs: sb });
        }
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let nb = bv.len();
        let out = av.iter().enumerate().map(|(i, &x)| x + bv[i % nb]).collect();
        self.push("add", sa, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub(crate) fn back_add(&mut self, a: usize, b: usize, g: &[T]) {
        self.acc(a, g);
        if let Some(db) = self.grad_buf(b) {
            let nb = db.len();
            for (i, &x) in g.iter().enumerate() {
                db[i % nb] += x;
            }
        }
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sa, &sb) {
            return Err(TensorError::Shape { op: "mul", lhs: sa, rhs: sb });
        }
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let nb = bv.len();
        let out = av.iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect();
        self.push("mul", sa, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub(crate) fn back_mul(&mut self, a: usize, b: usize, g: &[T]) {
        let (av, bv) = (self.val(a), self.val(b));
        let nb = bv.len();
        if let Some(da) = self.grad_buf(a) {
            for (i, d) in da.iter_mut().enumerate() {
                *d += g[i] * bv[i % nb];
            }
        }
        if let Some(db) = self.grad_buf(b) {
            for (i, &x) in g.iter().enumerate() {
                db[i % nb] += x * av[i];
            }
        }
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let out = self.data(a).iter().map(|&x| x * f).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a: a.0, factor: f }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, out, Op::Relu { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(TensorError::Shape { op: "reshape", lhs: sa, rhs: shape.to_vec() });
        }
        let out = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        self.check_axis("transpose", a, ax0)?;
        self.check_axis("transpose", a, ax1)?;
        let sa = self.shape(a).to_vec();
        let rank = sa.len();
        let mut strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * sa[d + 1];
        }
        let mut out_shape = sa.clone();
        out_shape.swap(ax0, ax1);
        let mut src_strides = strides.clone();
        src_strides.swap(ax0, ax1);
        let numel: usize = sa.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let av = self.val(a.0);
        let out = map.iter().map(|&s| av[s]).collect();
        self.push("transpose", out_shape, out, Op::Transpose { a: a.0, map }, &[a.0])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Argument { op: "concat", msg: "no inputs".into() })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        let vals: Vec<_> = parts.iter().map(|p| (self.val(p.0), self.shape(*p)[axis])).collect();
        for o in 0..outer {
            for (v, len) in &vals {
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", shape, out, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    pub(crate) fn back_concat(&mut self, parts: &[usize], axis: usize, out: usize, g: &[T]) {
        let shape = self.nodes[out].shape.clone();
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut offset = 0;
        for &p in parts {
            let len = self.nodes[p].shape[axis];
            if let Some(buf) = self.grad_buf(p) {
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                    let dst = &mut buf[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                }
            }
            offset += len;
        }
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let sa = self.shape(a).to_vec();
        if start + len > sa[axis] {
            return Err(TensorError::Argument {
                op: "slice",
                msg: format!("range {start}..{} exceeds axis length {}", start + len, sa[axis]),
            });
        }
        let (outer, full, inner) = split_axis(&sa, axis);
        let av = self.val(a.0);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&av[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { a: a.0, axis, start }, &[a.0])
    }

    pub(crate) fn back_slice(&mut self, a: usize, axis: usize, start: usize, out: usize, g: &[T]) {
        let full_shape = self.nodes[a].shape.clone();
        let len = self.nodes[out].shape[axis];
        let (outer, full, inner) = split_axis(&full_shape, axis);
        if let Some(buf) = self.grad_buf(a) {
            for o in 0..outer {
                let dst = &mut buf[(o * full + start) * inner..(o * full + start + len) * inner];
                dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]).for_each(|(d, &x)| *d += x);
            }
        }
    }

    /// Mean over one axis (removing it), or over everything when `axis` is `None`.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let av = self.val(a.0);
        match axis {
            None => {
                let n = av.len().max(1) as f64;
                let m = av.iter().map(|x| x.as_f64()).sum::<f64>() / n;
                self.push("mean", Vec::new(), vec![T::of(m)], Op::Mean { a: a.0, axis }, &[a.0])
            }
            Some(ax) => {
                self.check_axis("mean", a, ax)?;
                let (outer, len, inner) = split_axis(&sa, ax);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let s: f64 = (0..len).map(|l| av[(o * len + l) * inner + j].as_f64()).sum();
                        out[o * inner + j] = T::of(s / len as f64);
                    }
                }
                let mut shape = sa;
                shape.remove(ax);
                self.push("mean", shape, out, Op::Mean { a: a.0, axis }, &[a.0])
            }
        }
    }

    pub(crate) fn back_mean(&mut self, a: usize, axis: Option<usize>, g: &[T]) {
        let sa = self.nodes[a].shape.clone();
        let Some(buf) = self.grad_buf(a) else { return };
        match axis {
            None => {
                let share = g[0] / T::of(buf.len() as f64);
                buf.iter_mut().for_each(|d| *d += share);
            }
            Some(ax) => {
                let (outer, len, inner) = split_axis(&sa, ax);
                let inv = T::of(1.0 / len as f64);
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            buf[(o * len + l) * inner + j] += g[o * inner + j] * inv;
                        }
                    }
                }
            }
        }
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let out = self.softmax_values(a, axis, false);
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax { a: a.0, axis }, &[a.0])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let out = self.softmax_values(a, axis, true);
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax { a: a.0, axis }, &[a.0])
    }

    fn softmax_values(&self, a: Var, axis: usize, log: bool) -> Vec<T> {
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let av = self.data(a);
        let mut out = vec![T::zero(); av.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let max = (0..len).map(|l| av[at(l)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (av[at(l)].as_f64() - max).exp()).sum();
                let lz = z.ln();
                for l in 0..len {
                    let shifted = av[at(l)].as_f64() - max;
                    out[at(l)] = T::of(if log { shifted - lz } else { shifted.exp() / z });
                }
            }
        }
        out
    }

    pub(crate) fn back_softmax(&mut self, a: usize, axis: usize, out: usize, g: &[T]) {
        let (outer, len, inner) = split_axis(&self.nodes[a].shape, axis);
        let y = self.val(out);
        let Some(buf) = self.grad_buf(a) else { return };
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let dot: f64 = (0..len).map(|l| g[at(l)].as_f64() * y[at(l)].as_f64()).sum();
                for l in 0..len {
                    buf[at(l)] += T::of(y[at(l)].as_f64() * (g[at(l)].as_f64() - dot));
                }
            }
        }
    }

    pub(crate) fn back_log_softmax(&mut self, a: usize, axis: usize, out: usize, g: &[T]) {
        let (outer, len, inner) = split_axis(&self.nodes[a].shape, axis);
        let y = self.val(out);
        let Some(buf) = self.grad_buf(a) else { return };
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let total: f64 = (0..len).map(|l| g[at(l)].as_f64()).sum();
                for l in 0..len {
                    buf[at(l)] += T::of(g[at(l)].as_f64() - y[at(l)].as_f64().exp() * total);
                }
            }
        }
    }

    /// Gathers rows of a `[rows, width]` table; result `[indices.len(), width]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::Shape { op: "embedding_lookup", lhs: st, rhs: vec![indices.len()] });
        }
        let (rows, width) = (st[0], st[1]);
        let tv = self.val(table.0);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &idx in indices {
            if idx >= rows {
                return Err(TensorError::Index { op: "embedding_lookup", index: idx, len: rows });
            }
            out.extend_from_slice(&tv[idx * width..(idx + 1) * width]);
        }
        self.push(
            "embedding_lookup",
            vec![indices.len(), width],
            out,
            Op::Embedding { table: table.0, indices: indices.to_vec() },
            &[table.0],
        )
    }

    /// Softmax cross-entropy of `[rows, classes]` logits against integer
    /// targets. Rows whose target equals `ignore_index` contribute nothing;
    /// `Mean` divides by the number of contributing rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize, reduction: Reduction) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: sl, rhs: vec![targets.len()] });
        }
        let (rows, classes) = (sl[0], sl[1]);
        let lv = self.val(logits.0);
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..rows {
            let t = targets[r];
            if t == ignore_index {
                continue;
            }
            if t >= classes {
                return Err(TensorError::Index { op: "cross_entropy", index: t, len: classes });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            for (c, x) in row.iter().enumerate() {
                probs[r * classes + c] = T::of((x.as_f64() - max).exp() / z);
            }
            total += z.ln() + max - row[t].as_f64();
            count += 1;
        }
        let denom = match reduction {
            Reduction::Mean => count.max(1) as f64,
            Reduction::Sum => 1.0,
        };
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![T::of(total / denom)],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), ignore: ignore_index, probs, denom },
            &[logits.0],
        )
    }

    pub(crate) fn back_cross_entropy(&mut self, logits: usize, targets: &[usize], ignore: usize, probs: &[T], denom: f64, g: &[T]) {
        let classes = self.nodes[logits].shape[1];
        let scale = g[0].as_f64() / denom;
        let Some(buf) = self.grad_buf(logits) else { return };
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            for c in 0..classes {
                let p = probs[r * classes + c].as_f64();
                let onehot = if c == t { 1.0 } else { 0.0 };
                buf[r * classes + c] += T::of(scale * (p - onehot));
            }
        }
    }
}
