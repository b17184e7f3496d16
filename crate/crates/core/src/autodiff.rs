//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; inputs always
//! precede their consumers on the tape, so `backward` is a single reverse
//! sweep that visits each node at most once. Nodes whose inputs do not
//! require gradients are skipped entirely, which makes frozen sub-networks
//! free on the backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_into, MatMut, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Operation kind recorded on the tape, together with whatever the backward
/// pass needs.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu { x: Var, tanh: Vec<f64> },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SegmentMean { x: Var, segments: Vec<Segment> },
    Dropout { x: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; exactly zero for nodes the loss never reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .unwrap_or_else(|_| Tensor::zeros(node.value.shape())),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} expects a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dimensions disagree: {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), value, rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), value, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg, "scale")
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row")?;
        if self.value(b).len() != n {
            return Err(Error::Dimension(format!("add_row: bias of length {} for {n} columns", self.value(b).len())));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(b);
        self.push(Op::AddRow(x, b), value, rg, "add_row")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).data();
        let tanh: Vec<f64> = xs.iter().map(|&v| (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()).collect();
        let out: Vec<f64> = xs.iter().zip(&tanh).map(|(&v, &th)| 0.5 * v * (1.0 + th)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x);
        let tanh = if rg { tanh } else { Vec::new() };
        self.push(Op::Gelu { x, tanh }, value, rg, "gelu")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(Op::SoftmaxRows(x), value, rg, "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Validation(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (m, d) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Dimension(format!("layer_norm: affine parameters must have length {d}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![m, d], out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, value, rg, "layer_norm")
    }

    /// Gathers rows of `table` by id; the backward pass scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Validation(format!("embedding id {bad} out of range for {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Validation("embedding lookup with no ids".into()));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        self.push(Op::Embedding { table, ids: ids.to_vec() }, value, rg, "embedding")
    }

    /// Mean over the rows of each segment: `[T×d] -> [S×d]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let (t, d) = self.dims2(x, "segment_mean")?;
        check_segments(segments, t)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let dst = &mut out[s * d..(s + 1) * d];
            for r in seg.start..seg.start + seg.len {
                dst.iter_mut().zip(&xs[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / seg.len as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(vec![segments.len(), d], out)?;
        let rg = self.rg(x);
        self.push(Op::SegmentMean { x, segments: segments.to_vec() }, value, rg, "segment_mean")
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Dimension("dropout mask length differs from input".into()));
        }
        let out: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(Op::Dropout { x, mask }, value, rg, "dropout")
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[T×d]`; each segment attends only within itself and
    /// head `h` uses columns `h*d/heads .. (h+1)*d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "attention")?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return Err(Error::Dimension("attention: q, k, v must share shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("attention: width {d} not divisible by {heads} heads")));
        }
        check_segments(segments, t)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let prob_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; prob_len];
        let mut out = vec![0.0; t * d];
        let mut off = 0;
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let p = &mut probs[off..off + l * l];
                let qs = MatRef::block(qd, seg.start, h * dh, l, dh, d);
                let ks = MatRef::block(kd, seg.start, h * dh, l, dh, d);
                gemm(scale, qs, ks.t(), 0.0, p);
                p.chunks_mut(l).for_each(softmax_in_place);
                let vs = MatRef::block(vd, seg.start, h * dh, l, dh, d);
                gemm_into(1.0, MatRef::row_major(p, l, l), vs, 0.0, MatMut::block(&mut out, seg.start, h * dh, d));
                off += l * l;
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs }, value, rg, "attention")
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::Dimension(format!("cross_entropy: {} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_mut(c).for_each(softmax_in_place);
        let lg = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lg[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= m as f64;
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg, "sum")
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::Validation("no segments".into()));
    }
    for s in segments {
        if s.len == 0 || s.start + s.len > rows {
            return Err(Error::Dimension(format!("segment {s:?} invalid for {rows} rows")));
        }
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Adds `delta` into the gradient slot of `v`, allocating it on first use.
fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let len = node.value.len();
    let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

/// Detaches the gradient slot of `v` (zeroed if unset) so it can be written
/// while other nodes are borrowed.
fn take_grad(nodes: &mut [Node], v: Var) -> Vec<f64> {
    let len = nodes[v.0].value.len();
    nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn backprop(before: &mut [Node], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (before[a.0].value.shape()[0], before[a.0].value.shape()[1]);
            let n = before[b.0].value.shape()[1];
            let gm = MatRef::row_major(g, m, n);
            if before[a.0].requires_grad {
                let mut da = take_grad(before, *a);
                gemm(1.0, gm, MatRef::row_major(before[b.0].value.data(), k, n).t(), 1.0, &mut da);
                before[a.0].grad = Some(da);
            }
            if before[b.0].requires_grad {
                let mut db = take_grad(before, *b);
                gemm(1.0, MatRef::row_major(before[a.0].value.data(), m, k).t(), gm, 1.0, &mut db);
                before[b.0].grad = Some(db);
            }
        }
        Op::Add(a, b) => {
            accumulate(before, *a, |dst| add_into(dst, g));
            accumulate(before, *b, |dst| add_into(dst, g));
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(before[b.0].value.data()).map(|(g, y)| g * y).collect();
            let db: Vec<f64> = g.iter().zip(before[a.0].value.data()).map(|(g, x)| g * x).collect();
            accumulate(before, *a, |dst| add_into(dst, &da));
            accumulate(before, *b, |dst| add_into(dst, &db));
        }
        Op::Scale(a, c) => accumulate(before, *a, |dst| dst.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
        Op::AddRow(x, b) => {
            let n = before[b.0].value.len();
            accumulate(before, *x, |dst| add_into(dst, g));
            accumulate(before, *b, |dst| {
                for row in g.chunks(n) {
                    add_into(dst, row);
                }
            });
        }
        Op::Gelu { x, tanh } => {
            let xs = &before[x.0].value;
            let dx: Vec<f64> = xs
                .data()
                .iter()
                .zip(tanh)
                .zip(g)
                .map(|((&v, &th), &g)| {
                    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                    g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner)
                })
                .collect();
            accumulate(before, *x, |dst| add_into(dst, &dx));
        }
        Op::SoftmaxRows(x) => {
            let n = node.value.cols();
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..n {
                    dxr[c] = yr[c] * (gr[c] - dot);
                }
            }
            accumulate(before, *x, |dst| add_into(dst, &dx));
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let d = node.value.cols();
            let m = inv_std.len();
            let gv = before[gain.0].value.data().to_vec();
            if before[x.0].requires_grad {
                let mut dx = vec![0.0; m * d];
                for r in 0..m {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let scale = inv_std[r] / d as f64;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        dx[r * d + c] = scale * (d as f64 * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                accumulate(before, *x, |dst| add_into(dst, &dx));
            }
            accumulate(before, *gain, |dst| {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        dst[c] += gr[c] * hr[c];
                    }
                }
            });
            accumulate(before, *bias, |dst| {
                for gr in g.chunks(d) {
                    add_into(dst, gr);
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = node.value.cols();
            accumulate(before, *table, |dst| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dst[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::SegmentMean { x, segments } => {
            let d = node.value.cols();
            accumulate(before, *x, |dst| {
                for (s, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len as f64;
                    let gs = &g[s * d..(s + 1) * d];
                    for r in seg.start..seg.start + seg.len {
                        dst[r * d..(r + 1) * d].iter_mut().zip(gs).for_each(|(o, g)| *o += g * inv);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            accumulate(before, *x, |dst| dst.iter_mut().zip(g).zip(mask).for_each(|((d, g), m)| *d += g * m));
        }
        Op::Attention { q, k, v, segments, heads, probs } => {
            attention_backward(before, node, g, (*q, *k, *v), segments, *heads, probs);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let m = labels.len();
            let c = probs.len() / m;
            let scale = g[0] / m as f64;
            accumulate(before, *logits, |dst| {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        dst[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(before, *x, |dst| dst.iter_mut().for_each(|d| *d += g[0])),
    }
}

fn attention_backward(
    before: &mut [Node],
    node: &Node,
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    segments: &[Segment],
    heads: usize,
    probs: &[f64],
) {
    let (t, d) = (node.value.shape()[0], node.value.shape()[1]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let (qd, kd, vd) = (before[q.0].value.data(), before[k.0].value.data(), before[v.0].value.data());
    let max_l = segments.iter().map(|s| s.len).max().unwrap_or(0);
    let mut dp = vec![0.0; max_l * max_l];
    let mut off = 0;
    for seg in segments {
        let l = seg.len;
        for h in 0..heads {
            let p = &probs[off..off + l * l];
            off += l * l;
            let go = MatRef::block(g, seg.start, h * dh, l, dh, d);
            let pm = MatRef::row_major(p, l, l);
            // dV = P^T dO
            gemm_into(1.0, pm.t(), go, 0.0, MatMut::block(&mut dv, seg.start, h * dh, d));
            // dP = dO V^T
            let dpl = &mut dp[..l * l];
            gemm(1.0, go, MatRef::block(vd, seg.start, h * dh, l, dh, d).t(), 0.0, dpl);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for r in 0..l {
                let pr = &p[r * l..(r + 1) * l];
                let dr = &mut dpl[r * l..(r + 1) * l];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for c in 0..l {
                    dr[c] = pr[c] * (dr[c] - dot) * scale;
                }
            }
            let ds = MatRef::row_major(dpl, l, l);
            gemm_into(1.0, ds, MatRef::block(kd, seg.start, h * dh, l, dh, d), 0.0, MatMut::block(&mut dq, seg.start, h * dh, d));
            gemm_into(1.0, ds.t(), MatRef::block(qd, seg.start, h * dh, l, dh, d), 0.0, MatMut::block(&mut dk, seg.start, h * dh, d));
        }
    }
    accumulate(before, q, |dst| add_into(dst, &dq));
    accumulate(before, k, |dst| add_into(dst, &dk));
    accumulate(before, v, |dst| add_into(dst, &dv));
}
