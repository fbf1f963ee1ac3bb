//! Primitive ops: forward kernels, save rules, and vector-Jacobian products.
//!
//! Tensors are handled as matrices `[rows × cols]`. Sequence ops take a
//! [`SeqLayout`] and treat row `b·frames + t` as frame `t` of sequence `b`.

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{NDArray, Scalar};

/// Row layout of a batch of equal-length (padded) sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub frames: usize,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.frames
    }
}

/// Geometry of streaming attention over a left-context window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub layout: SeqLayout,
    pub heads: usize,
    /// Look-back in frames; each query sees keys `t-window ..= t`.
    pub window: usize,
}

impl Window {
    pub fn width(&self) -> usize {
        self.window + 1
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Param,
    Matmul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(T),
    Silu,
    Square,
    Abs,
    LayerNorm { eps: T },
    WindowScores { win: Window, scale: T },
    WindowBias { win: Window },
    WindowSoftmax,
    WindowApply { win: Window },
    DepthwiseConv { layout: SeqLayout },
    GatherRows { index: Vec<usize> },
    ContrastScores { anchors: Vec<usize>, cands: Vec<usize>, scale: T },
    CrossEntropy { targets: Vec<usize>, weights: Vec<T> },
    WeightedSum { weights: Vec<T> },
    Sum,
    StopGrad,
    MaskRows { mask: Vec<bool>, width: usize },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Matmul => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Silu => "silu",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::LayerNorm { .. } => "layer_norm",
            Op::WindowScores { .. } => "window_scores",
            Op::WindowBias { .. } => "window_bias",
            Op::WindowSoftmax => "window_softmax",
            Op::WindowApply { .. } => "window_apply",
            Op::DepthwiseConv { .. } => "depthwise_conv",
            Op::GatherRows { .. } => "gather_rows",
            Op::ContrastScores { .. } => "contrast_scores",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum => "sum",
            Op::StopGrad => "stop_gradient",
            Op::MaskRows { .. } => "mask_rows",
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn matrix<T: Scalar>(op: &'static str, a: &NDArray<T>) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn same_shape<T: Scalar>(op: &'static str, a: &NDArray<T>, b: &NDArray<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
    // a is [m×k] (stored [k×m] when ta), b is [k×n] (stored [n×k] when tb).
    let mut c = vec![T::zero(); m * n];
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, T::zero(), &mut c, n as isize, 1);
    c
}

fn layer_norm_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + eps).sqrt())
}

impl<T: Scalar> Tape<T> {
    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.requires_grad(i))
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = matrix("matmul", av)?;
        let (k2, n) = matrix("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let out = NDArray::from_vec([m, n], matmul_raw(av.data(), bv.data(), m, k, n, false, false))?;
        let rg = self.rg(&[a, b]);
        if rg {
            if self.requires_grad(b) {
                self.save(a);
            }
            if self.requires_grad(a) {
                self.save(b);
            }
        }
        Ok(self.push_raw(Op::Matmul, vec![a, b], out, rg, None))
    }

    /// Adds a `[C]` bias to every row of `[.. × C]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.val(x), self.val(b));
        if bv.len() != xv.cols() {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        let c = bv.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bv.data()[i % c];
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push_raw(Op::AddBias, vec![x, b], out, rg, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape("add", av, bv)?;
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push_raw(Op::Add, vec![a, b], out, rg, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape("sub", av, bv)?;
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = *o - v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push_raw(Op::Sub, vec![a, b], out, rg, None))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape("mul", av, bv)?;
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = *o * v;
        }
        let rg = self.rg(&[a, b]);
        if rg {
            if self.requires_grad(a) {
                self.save(b);
            }
            if self.requires_grad(b) {
                self.save(a);
            }
        }
        Ok(self.push_raw(Op::Mul, vec![a, b], out, rg, None))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let out = self.val(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        Ok(self.push_raw(Op::Scale(c), vec![x], out, rg, None))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.val(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        if rg {
            self.save(x);
        }
        Ok(self.push_raw(Op::Silu, vec![x], out, rg, None))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.val(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        if rg {
            self.save(x);
        }
        Ok(self.push_raw(Op::Square, vec![x], out, rg, None))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.val(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        if rg {
            self.save(x);
        }
        Ok(self.push_raw(Op::Abs, vec![x], out, rg, None))
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gamma·x̂ + beta`. Statistics are recomputed in backward from the
    /// saved input, so only the input is retained.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(mismatch(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let (mean, rstd) = layer_norm_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        if self.requires_grad(x) || self.requires_grad(gamma) {
            self.save(x);
        }
        Ok(self.push_raw(Op::LayerNorm { eps }, vec![x, gamma, beta], out, rg, None))
    }

    /// Per-head dot products of each query with the keys of its left-context
    /// window: output `[rows·heads × (window+1)]`, column `j` scoring key
    /// frame `t-j`. Entries with `t-j < 0` are zero and masked downstream.
    pub fn window_scores(&mut self, q: NodeId, k: NodeId, win: Window, scale: T) -> Result<NodeId> {
        let (qv, kv) = (self.val(q), self.val(k));
        same_shape("window_scores", qv, kv)?;
        let (n, d) = matrix("window_scores", qv)?;
        check_window("window_scores", n, d, win)?;
        let (h, w) = (win.heads, win.width());
        let dh = d / h;
        let mut out = vec![T::zero(); n * h * w];
        for r in 0..n {
            let t = r % win.layout.frames;
            for j in 0..w.min(t + 1) {
                let kr = r - j;
                for hh in 0..h {
                    let qs = &qv.data()[r * d + hh * dh..r * d + (hh + 1) * dh];
                    let ks = &kv.data()[kr * d + hh * dh..kr * d + (hh + 1) * dh];
                    let s = qs.iter().zip(ks).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    out[(r * h + hh) * w + j] = s * scale;
                }
            }
        }
        let out = NDArray::from_vec([n * h, w], out)?;
        let rg = self.rg(&[q, k]);
        if rg {
            if self.requires_grad(q) {
                self.save(k);
            }
            if self.requires_grad(k) {
                self.save(q);
            }
        }
        Ok(self.push_raw(Op::WindowScores { win, scale }, vec![q, k], out, rg, None))
    }

    /// Adds a learned `[heads × (window+1)]` relative-position bias.
    pub fn window_bias(&mut self, scores: NodeId, bias: NodeId, win: Window) -> Result<NodeId> {
        let (sv, bv) = (self.val(scores), self.val(bias));
        let (h, w) = (win.heads, win.width());
        if bv.len() != h * w || sv.cols() != w || sv.rows() != win.layout.rows() * h {
            return Err(mismatch("window_bias", format!("{:?} + {:?}", sv.shape(), bv.shape())));
        }
        let mut out = sv.clone();
        for (i, row) in out.data_mut().chunks_mut(w).enumerate() {
            let hh = i % h;
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + bv.data()[hh * w + j];
            }
        }
        let rg = self.rg(&[scores, bias]);
        Ok(self.push_raw(Op::WindowBias { win }, vec![scores, bias], out, rg, None))
    }

    /// Softmax over the valid (`t-j ≥ 0`) entries of each window row;
    /// invalid entries are exactly zero.
    pub fn window_softmax(&mut self, scores: NodeId, win: Window) -> Result<NodeId> {
        let sv = self.val(scores);
        let (h, w) = (win.heads, win.width());
        if sv.cols() != w || sv.rows() != win.layout.rows() * h {
            return Err(mismatch("window_softmax", format!("{:?} for {win:?}", sv.shape())));
        }
        let mut out = sv.clone();
        for (i, row) in out.data_mut().chunks_mut(w).enumerate() {
            let t = (i / h) % win.layout.frames;
            let valid = w.min(t + 1);
            let m = row[..valid].iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in &mut row[..valid] {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in &mut row[..valid] {
                *v = *v / z;
            }
            for v in &mut row[valid..] {
                *v = T::zero();
            }
        }
        let rg = self.rg(&[scores]);
        let id = self.push_raw(Op::WindowSoftmax, vec![scores], out, rg, None);
        if rg {
            self.save(id);
        }
        Ok(id)
    }

    /// Weighted sum of value rows over each query's window.
    pub fn window_apply(&mut self, probs: NodeId, v: NodeId, win: Window) -> Result<NodeId> {
        let (pv, vv) = (self.val(probs), self.val(v));
        let (n, d) = matrix("window_apply", vv)?;
        check_window("window_apply", n, d, win)?;
        let (h, w) = (win.heads, win.width());
        if pv.rows() != n * h || pv.cols() != w {
            return Err(mismatch("window_apply", format!("{:?} with {:?}", pv.shape(), vv.shape())));
        }
        let dh = d / h;
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let t = r % win.layout.frames;
            for hh in 0..h {
                let prow = &pv.data()[(r * h + hh) * w..(r * h + hh + 1) * w];
                let o = &mut out[r * d + hh * dh..r * d + (hh + 1) * dh];
                for (j, &p) in prow.iter().enumerate().take(w.min(t + 1)) {
                    let vs = &vv.data()[(r - j) * d + hh * dh..(r - j) * d + (hh + 1) * dh];
                    for (oo, &x) in o.iter_mut().zip(vs) {
                        *oo = *oo + p * x;
                    }
                }
            }
        }
        let out = NDArray::from_vec([n, d], out)?;
        let rg = self.rg(&[probs, v]);
        if rg {
            if self.requires_grad(probs) {
                self.save(v);
            }
            if self.requires_grad(v) {
                self.save(probs);
            }
        }
        Ok(self.push_raw(Op::WindowApply { win }, vec![probs, v], out, rg, None))
    }

    /// Causal depthwise 1-D convolution: `y[t,c] = b[c] + Σ_i w[i,c]·x[t-i,c]`
    /// over `i < kernel`, with frames before the sequence start treated as zero.
    pub fn depthwise_conv(&mut self, x: NodeId, w: NodeId, b: NodeId, layout: SeqLayout) -> Result<NodeId> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        let (n, c) = matrix("depthwise_conv", xv)?;
        let (kk, c2) = matrix("depthwise_conv", wv)?;
        if c2 != c || bv.len() != c || n != layout.rows() {
            return Err(mismatch(
                "depthwise_conv",
                format!("x {:?}, w {:?}, b {:?}, {layout:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let t = r % layout.frames;
            let o = &mut out[r * c..(r + 1) * c];
            o.copy_from_slice(bv.data());
            for i in 0..kk.min(t + 1) {
                let xs = &xv.data()[(r - i) * c..(r - i + 1) * c];
                let ws = &wv.data()[i * c..(i + 1) * c];
                for ((oo, &xx), &ww) in o.iter_mut().zip(xs).zip(ws) {
                    *oo = *oo + ww * xx;
                }
            }
        }
        let out = NDArray::from_vec([n, c], out)?;
        let rg = self.rg(&[x, w, b]);
        if rg {
            if self.requires_grad(w) {
                self.save(x);
            }
            if self.requires_grad(x) {
                self.save(w);
            }
        }
        Ok(self.push_raw(Op::DepthwiseConv { layout }, vec![x, w, b], out, rg, None))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        if index.is_empty() {
            return Err(mismatch("gather_rows", "empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_rows", format!("row {bad} out of {r}")));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = NDArray::from_vec([index.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push_raw(Op::GatherRows { index }, vec![x], out, rg, None))
    }

    /// Scores each anchor row of `pred` against a row list of `targets`:
    /// `s[i,c] = scale · pred[anchors[i]] · targets[cands[i·C + c]]`.
    pub fn contrast_scores(
        &mut self,
        pred: NodeId,
        targets: NodeId,
        anchors: Vec<usize>,
        cands: Vec<usize>,
        scale: T,
    ) -> Result<NodeId> {
        let (pv, tv) = (self.val(pred), self.val(targets));
        let (pr, d) = matrix("contrast_scores", pv)?;
        let (tr, d2) = matrix("contrast_scores", tv)?;
        if d != d2 || anchors.is_empty() || !cands.len().is_multiple_of(anchors.len()) || cands.is_empty() {
            return Err(mismatch(
                "contrast_scores",
                format!(
                    "pred {:?}, targets {:?}, {} anchors, {} cands",
                    pv.shape(),
                    tv.shape(),
                    anchors.len(),
                    cands.len()
                ),
            ));
        }
        if anchors.iter().any(|&a| a >= pr) || cands.iter().any(|&c| c >= tr) {
            return Err(mismatch("contrast_scores", "row index out of range".into()));
        }
        let nc = cands.len() / anchors.len();
        let mut out = vec![T::zero(); cands.len()];
        for (i, &a) in anchors.iter().enumerate() {
            let p = &pv.data()[a * d..(a + 1) * d];
            for c in 0..nc {
                let tr = cands[i * nc + c];
                let t = &tv.data()[tr * d..(tr + 1) * d];
                out[i * nc + c] = p.iter().zip(t).fold(T::zero(), |s, (&x, &y)| s + x * y) * scale;
            }
        }
        let out = NDArray::from_vec([anchors.len(), nc], out)?;
        let rg = self.rg(&[pred, targets]);
        if rg {
            if self.requires_grad(pred) {
                self.save(targets);
            }
            if self.requires_grad(targets) {
                self.save(pred);
            }
        }
        Ok(self.push_raw(Op::ContrastScores { anchors, cands, scale }, vec![pred, targets], out, rg, None))
    }

    /// `Σ_i w_i · (logsumexp(row_i) − row_i[target_i])`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, weights: Vec<T>) -> Result<NodeId> {
        let lv = self.val(logits);
        let (r, c) = matrix("cross_entropy", lv)?;
        if targets.len() != r || weights.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(mismatch(
                "cross_entropy",
                format!("logits {:?}, {} targets, {} weights", lv.shape(), targets.len(), weights.len()),
            ));
        }
        let mut total = T::zero();
        for (i, row) in lv.data().chunks(c).enumerate() {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln();
            total = total + weights[i] * (lse - row[targets[i]]);
        }
        let rg = self.rg(&[logits]);
        if rg {
            self.save(logits);
        }
        Ok(self.push_raw(Op::CrossEntropy { targets, weights }, vec![logits], NDArray::scalar(total), rg, None))
    }

    /// `Σ_r w_r · Σ_c x[r,c]`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        let xv = self.val(x);
        if weights.len() != xv.rows() {
            return Err(mismatch("weighted_sum", format!("{:?} with {} weights", xv.shape(), weights.len())));
        }
        let c = xv.cols();
        let total = xv
            .data()
            .chunks(c)
            .zip(&weights)
            .fold(T::zero(), |s, (row, &w)| s + w * row.iter().fold(T::zero(), |a, &v| a + v));
        let rg = self.rg(&[x]);
        Ok(self.push_raw(Op::WeightedSum { weights }, vec![x], NDArray::scalar(total), rg, None))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.val(x).data().iter().fold(T::zero(), |s, &v| s + v);
        let rg = self.rg(&[x]);
        Ok(self.push_raw(Op::Sum, vec![x], NDArray::scalar(total), rg, None))
    }

    /// Identity in forward; blocks gradients. Shares storage with its input
    /// for accounting purposes.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let out = self.val(x).clone();
        let id = self.push_raw(Op::StopGrad, vec![x], out, false, None);
        self.set_alias(id, x);
        id
    }

    /// Overwrites the leading `fill.len()` columns of the rows where `mask`
    /// is true with `fill`; the rest of each row passes through.
    pub fn mask_rows(&mut self, x: NodeId, mask: Vec<bool>, fill: &[T]) -> Result<NodeId> {
        let xv = self.val(x);
        if mask.len() != xv.rows() || fill.len() > xv.cols() {
            return Err(mismatch(
                "mask_rows",
                format!("{:?} with mask of {} and fill of {}", xv.shape(), mask.len(), fill.len()),
            ));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (row, &m) in out.data_mut().chunks_mut(c).zip(&mask) {
            if m {
                row[..fill.len()].copy_from_slice(fill);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push_raw(Op::MaskRows { mask, width: fill.len() }, vec![x], out, rg, None))
    }

    /// Vector-Jacobian product of one node; entries align with `inputs`.
    pub(crate) fn backward_node(&self, id: NodeId, g: &NDArray<T>) -> Result<Vec<Option<NDArray<T>>>> {
        let node = &self.nodes[id.0];
        let ins = &node.inputs;
        let want = |i: usize| self.requires_grad(ins[i]);
        let shape_of = |i: usize| self.shape(ins[i]).to_vec();
        let gd = g.data();
        let grads = match &node.op {
            Op::Leaf | Op::Param | Op::StopGrad => vec![None; ins.len()],
            Op::Matmul => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = self.shape(ins[0])[1];
                let da = if want(0) {
                    let b = self.val(ins[1]);
                    Some(NDArray::from_vec([m, k], matmul_raw(gd, b.data(), m, n, k, false, true))?)
                } else {
                    None
                };
                let db = if want(1) {
                    let a = self.val(ins[0]);
                    Some(NDArray::from_vec([k, n], matmul_raw(a.data(), gd, k, m, n, true, false))?)
                } else {
                    None
                };
                vec![da, db]
            }
            Op::AddBias => {
                let db = want(1).then(|| {
                    let c = g.cols();
                    let mut acc = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    NDArray::from_vec(shape_of(1), acc)
                });
                vec![want(0).then(|| g.clone()), db.transpose()?]
            }
            Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
            Op::Mul => {
                let prod = |other: usize| {
                    let o = self.val(ins[other]);
                    let mut r = g.clone();
                    for (x, &y) in r.data_mut().iter_mut().zip(o.data()) {
                        *x = *x * y;
                    }
                    r
                };
                vec![want(0).then(|| prod(1)), want(1).then(|| prod(0))]
            }
            Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
            Op::Silu => {
                let x = self.val(ins[0]);
                let mut r = g.clone();
                for (o, &xv) in r.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xv);
                    *o = *o * s * (T::one() + xv * (T::one() - s));
                }
                vec![Some(r)]
            }
            Op::Square => {
                let x = self.val(ins[0]);
                let two = T::from_f64(2.0);
                let mut r = g.clone();
                for (o, &xv) in r.data_mut().iter_mut().zip(x.data()) {
                    *o = *o * two * xv;
                }
                vec![Some(r)]
            }
            Op::Abs => {
                let x = self.val(ins[0]);
                let mut r = g.clone();
                for (o, &xv) in r.data_mut().iter_mut().zip(x.data()) {
                    let s = if xv > T::zero() {
                        T::one()
                    } else if xv < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *o = *o * s;
                }
                vec![Some(r)]
            }
            Op::LayerNorm { eps } => layer_norm_backward(self, ins, g, *eps)?,
            Op::WindowScores { win, scale } => {
                let (h, w) = (win.heads, win.width());
                let d = self.shape(ins[0])[1];
                let n = self.shape(ins[0])[0];
                let dh = d / h;
                let mut dq = want(0).then(|| vec![T::zero(); n * d]);
                let mut dk = want(1).then(|| vec![T::zero(); n * d]);
                let qv = dk.as_ref().map(|_| self.val(ins[0]).data());
                let kv = dq.as_ref().map(|_| self.val(ins[1]).data());
                for r in 0..n {
                    let t = r % win.layout.frames;
                    for j in 0..w.min(t + 1) {
                        let kr = r - j;
                        for hh in 0..h {
                            let gs = gd[(r * h + hh) * w + j] * *scale;
                            let (qo, ko) = (r * d + hh * dh, kr * d + hh * dh);
                            if let (Some(dq), Some(kv)) = (dq.as_mut(), kv) {
                                for e in 0..dh {
                                    dq[qo + e] = dq[qo + e] + gs * kv[ko + e];
                                }
                            }
                            if let (Some(dk), Some(qv)) = (dk.as_mut(), qv) {
                                for e in 0..dh {
                                    dk[ko + e] = dk[ko + e] + gs * qv[qo + e];
                                }
                            }
                        }
                    }
                }
                vec![
                    dq.map(|v| NDArray::from_vec([n, d], v)).transpose()?,
                    dk.map(|v| NDArray::from_vec([n, d], v)).transpose()?,
                ]
            }
            Op::WindowBias { win } => {
                let (h, w) = (win.heads, win.width());
                let db = want(1).then(|| {
                    let mut acc = vec![T::zero(); h * w];
                    for (i, row) in gd.chunks(w).enumerate() {
                        let hh = i % h;
                        for (j, &v) in row.iter().enumerate() {
                            acc[hh * w + j] = acc[hh * w + j] + v;
                        }
                    }
                    NDArray::from_vec(shape_of(1), acc)
                });
                vec![want(0).then(|| g.clone()), db.transpose()?]
            }
            Op::WindowSoftmax => {
                let y = self.val(id);
                let w = y.cols();
                let mut r = g.clone();
                for (grow, yrow) in r.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(r)]
            }
            Op::WindowApply { win } => {
                let (h, w) = (win.heads, win.width());
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let dh = d / h;
                let mut dp = want(0).then(|| vec![T::zero(); n * h * w]);
                let mut dv = want(1).then(|| vec![T::zero(); n * d]);
                let vv = dp.as_ref().map(|_| self.val(ins[1]).data());
                let pv = dv.as_ref().map(|_| self.val(ins[0]).data());
                for r in 0..n {
                    let t = r % win.layout.frames;
                    for hh in 0..h {
                        let go = &gd[r * d + hh * dh..r * d + (hh + 1) * dh];
                        for j in 0..w.min(t + 1) {
                            let vo = (r - j) * d + hh * dh;
                            let pi = (r * h + hh) * w + j;
                            if let (Some(dp), Some(vv)) = (dp.as_mut(), vv) {
                                dp[pi] = go.iter().zip(&vv[vo..vo + dh]).fold(T::zero(), |s, (&a, &b)| s + a * b);
                            }
                            if let (Some(dv), Some(pv)) = (dv.as_mut(), pv) {
                                let p = pv[pi];
                                for e in 0..dh {
                                    dv[vo + e] = dv[vo + e] + p * go[e];
                                }
                            }
                        }
                    }
                }
                vec![
                    dp.map(|v| NDArray::from_vec([n * h, w], v)).transpose()?,
                    dv.map(|v| NDArray::from_vec([n, d], v)).transpose()?,
                ]
            }
            Op::DepthwiseConv { layout } => {
                let (n, c) = (g.shape()[0], g.shape()[1]);
                let kk = self.shape(ins[1])[0];
                let mut dx = want(0).then(|| vec![T::zero(); n * c]);
                let mut dw = want(1).then(|| vec![T::zero(); kk * c]);
                let wv = dx.as_ref().map(|_| self.val(ins[1]).data());
                let xv = dw.as_ref().map(|_| self.val(ins[0]).data());
                for r in 0..n {
                    let t = r % layout.frames;
                    let go = &gd[r * c..(r + 1) * c];
                    for i in 0..kk.min(t + 1) {
                        let xo = (r - i) * c;
                        if let (Some(dx), Some(wv)) = (dx.as_mut(), wv) {
                            for ch in 0..c {
                                dx[xo + ch] = dx[xo + ch] + wv[i * c + ch] * go[ch];
                            }
                        }
                        if let (Some(dw), Some(xv)) = (dw.as_mut(), xv) {
                            for ch in 0..c {
                                dw[i * c + ch] = dw[i * c + ch] + xv[xo + ch] * go[ch];
                            }
                        }
                    }
                }
                let db = want(2).then(|| {
                    let mut acc = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    NDArray::from_vec(shape_of(2), acc)
                });
                vec![
                    dx.map(|v| NDArray::from_vec([n, c], v)).transpose()?,
                    dw.map(|v| NDArray::from_vec([kk, c], v)).transpose()?,
                    db.transpose()?,
                ]
            }
            Op::GatherRows { index } => {
                let shape = shape_of(0);
                let mut dx = NDArray::zeros(shape);
                let c = g.cols();
                for (k, &i) in index.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for (a, &v) in dst.iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *a = *a + v;
                    }
                }
                vec![Some(dx)]
            }
            Op::ContrastScores { anchors, cands, scale } => {
                let d = self.shape(ins[0])[1];
                let nc = cands.len() / anchors.len();
                let mut dp = want(0).then(|| NDArray::zeros(shape_of(0)));
                let mut dt = want(1).then(|| NDArray::zeros(shape_of(1)));
                let tv = dp.as_ref().map(|_| self.val(ins[1]).data());
                let pv = dt.as_ref().map(|_| self.val(ins[0]).data());
                for (i, &a) in anchors.iter().enumerate() {
                    for c in 0..nc {
                        let gs = gd[i * nc + c] * *scale;
                        let tr = cands[i * nc + c];
                        if let (Some(dp), Some(tv)) = (dp.as_mut(), tv) {
                            let dst = &mut dp.data_mut()[a * d..(a + 1) * d];
                            for (o, &x) in dst.iter_mut().zip(&tv[tr * d..(tr + 1) * d]) {
                                *o = *o + gs * x;
                            }
                        }
                        if let (Some(dt), Some(pv)) = (dt.as_mut(), pv) {
                            let dst = &mut dt.data_mut()[tr * d..(tr + 1) * d];
                            for (o, &x) in dst.iter_mut().zip(&pv[a * d..(a + 1) * d]) {
                                *o = *o + gs * x;
                            }
                        }
                    }
                }
                vec![dp, dt]
            }
            Op::CrossEntropy { targets, weights } => {
                let l = self.val(ins[0]);
                let c = l.cols();
                let g0 = gd[0];
                let mut dl = l.clone();
                for (i, row) in dl.data_mut().chunks_mut(c).enumerate() {
                    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z = z + *v;
                    }
                    let wgt = g0 * weights[i];
                    for v in row.iter_mut() {
                        *v = *v / z * wgt;
                    }
                    row[targets[i]] = row[targets[i]] - wgt;
                }
                vec![Some(dl)]
            }
            Op::WeightedSum { weights } => {
                let mut dx = NDArray::zeros(shape_of(0));
                let c = dx.cols();
                for (row, &w) in dx.data_mut().chunks_mut(c).zip(weights) {
                    row.fill(gd[0] * w);
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(NDArray::full(shape_of(0), gd[0]))],
            Op::MaskRows { mask, width } => {
                let mut r = g.clone();
                let c = r.cols();
                for (row, &m) in r.data_mut().chunks_mut(c).zip(mask) {
                    if m {
                        row[..*width].fill(T::zero());
                    }
                }
                vec![Some(r)]
            }
        };
        Ok(grads)
    }
}

fn check_window(op: &'static str, n: usize, d: usize, win: Window) -> Result<()> {
    if n != win.layout.rows() || win.heads == 0 || !d.is_multiple_of(win.heads) {
        return Err(mismatch(op, format!("[{n}×{d}] for {win:?}")));
    }
    Ok(())
}

fn layer_norm_backward<T: Scalar>(
    tape: &Tape<T>,
    ins: &[NodeId],
    g: &NDArray<T>,
    eps: T,
) -> Result<Vec<Option<NDArray<T>>>> {
    let want = |i: usize| tape.requires_grad(ins[i]);
    let c = g.cols();
    let cf = T::from_f64(c as f64);
    let gamma = tape.val(ins[1]).data();
    let mut dx = want(0).then(|| vec![T::zero(); g.len()]);
    let mut dgamma = want(1).then(|| vec![T::zero(); c]);
    let mut dbeta = want(2).then(|| vec![T::zero(); c]);
    let x = (want(0) || want(1)).then(|| tape.val(ins[0]).data());
    for (r, grow) in g.data().chunks(c).enumerate() {
        if let Some(db) = dbeta.as_mut() {
            for (a, &v) in db.iter_mut().zip(grow) {
                *a = *a + v;
            }
        }
        let Some(x) = x else { continue };
        let xrow = &x[r * c..(r + 1) * c];
        let (mean, rstd) = layer_norm_stats(xrow, eps);
        let xhat: Vec<T> = xrow.iter().map(|&v| (v - mean) * rstd).collect();
        if let Some(dg) = dgamma.as_mut() {
            for j in 0..c {
                dg[j] = dg[j] + grow[j] * xhat[j];
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxhat: Vec<T> = (0..c).map(|j| grow[j] * gamma[j]).collect();
            let m1 = dxhat.iter().fold(T::zero(), |s, &v| s + v) / cf;
            let m2 = dxhat.iter().zip(&xhat).fold(T::zero(), |s, (&a, &b)| s + a * b) / cf;
            for j in 0..c {
                dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
    Ok(vec![
        dx.map(|v| NDArray::from_vec(g.shape().to_vec(), v)).transpose()?,
        dgamma.map(|v| NDArray::from_vec(tape.shape(ins[1]).to_vec(), v)).transpose()?,
        dbeta.map(|v| NDArray::from_vec(tape.shape(ins[2]).to_vec(), v)).transpose()?,
    ])
}
