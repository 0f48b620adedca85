//! Reverse-mode automatic differentiation over a recorded op graph.
//!
//! The tape is eager: every builder method computes its output immediately
//! and records the op, so callers can inspect intermediate values (peak
//! extraction, symmetry selection) while the graph is being built.
//! `backward` replays the recorded ops in reverse and accumulates gradients;
//! parameter gradients are then written to the owning [`ParamSet`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{self, same_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    ScaleConst(Var, f64),
    MulScalarVar(Var, Var),
    DivScalarVar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, k: usize, stride: usize },
    AddBiasLast(Var, Var),
    MulBiasLast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SqrtEps(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MeanRows(Var),
    SliceFlat { x: Var, start: usize, len: usize },
    ConcatFlat(Vec<Var>),
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    GatherElems { x: Var, idx: Vec<usize> },
}

struct Node {
    op: Op,
    data: Tensor,
    tag: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, data: Tensor) -> Var {
        self.nodes.push(Node { op, data, tag: None });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].data
    }

    /// Attach a diagnostic name; used when reporting non-finite tensors.
    pub fn tag(&mut self, v: Var, name: &str) {
        self.nodes[v.0].tag = Some(name.to_string());
    }

    /// First node holding a non-finite value, by recording order.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.data.is_finite() {
                let label = n
                    .tag
                    .clone()
                    .unwrap_or_else(|| format!("{:?}", std::mem::discriminant(&n.op)));
                return Some(format!("node {i} ({label})"));
            }
        }
        None
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn scalar_input(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Mount a parameter: snapshots its current value onto the tape.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        self.push(Op::Param(id), ps.get(id).value.clone())
    }

    // ── Elementwise and algebra ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.data(a), self.data(b))?;
        let data: Vec<f64> =
            self.data(a).data().iter().zip(self.data(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.data(a).shape().to_vec();
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, data)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.data(a), self.data(b))?;
        let data: Vec<f64> =
            self.data(a).data().iter().zip(self.data(b).data()).map(|(x, y)| x - y).collect();
        let shape = self.data(a).shape().to_vec();
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, data)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.data(a), self.data(b))?;
        let data: Vec<f64> =
            self.data(a).data().iter().zip(self.data(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.data(a).shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, data)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|v| -v).collect(),
        );
        self.push(Op::Neg(x), t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|v| c * v).collect(),
        );
        self.push(Op::ScaleConst(x, c), t)
    }

    /// Broadcast multiply by a size-1 tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.data(s).numel() != 1 {
            return Err(Error::Dim("mul_scalar expects a size-1 scalar".into()));
        }
        let sv = self.data(s).item();
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|v| v * sv).collect(),
        );
        Ok(self.push(Op::MulScalarVar(x, s), t))
    }

    /// Broadcast divide by a size-1 tensor.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.data(s).numel() != 1 {
            return Err(Error::Dim("div_scalar expects a size-1 scalar".into()));
        }
        let sv = self.data(s).item();
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|v| v / sv).collect(),
        );
        Ok(self.push(Op::DivScalarVar(x, s), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.data(a).shape().to_vec(), self.data(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = tensor::matmul(self.data(a).data(), self.data(b).data(), m, k, n);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], data)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("transpose expects rank-2, got {s:?}")));
        }
        let data = tensor::transpose(self.data(x).data(), s[0], s[1]);
        Ok(self.push(Op::Transpose(x), Tensor::new(vec![s[1], s[0]], data)))
    }

    /// Same-padding cross-correlation; `x` is [H, W, Ci], `w` is [k, k, Ci, Co].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.data(x).shape().to_vec();
        let sw = self.data(w).shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Dim(format!("conv2d shapes x={sx:?} w={sw:?}")));
        }
        let k = sw[0];
        if sw[1] != k {
            return Err(Error::Dim(format!("conv2d kernel must be square, got {sw:?}")));
        }
        if k != 1 && k != 3 {
            return Err(Error::Contract(format!("unsupported conv kernel size {k}")));
        }
        if sw[2] != sx[2] {
            return Err(Error::Dim(format!(
                "conv2d input channels {} vs kernel channels {}",
                sx[2], sw[2]
            )));
        }
        let (data, oh, ow) = tensor::conv2d(
            self.data(x).data(),
            sx[0],
            sx[1],
            sx[2],
            self.data(w).data(),
            k,
            sw[3],
            stride,
        );
        Ok(self.push(Op::Conv2d { x, w, k, stride }, Tensor::new(vec![oh, ow, sw[3]], data)))
    }

    /// Broadcast-add a vector over the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.data(x).shape().last().unwrap();
        if self.data(b).shape() != [d] {
            return Err(Error::Dim(format!(
                "bias shape {:?} vs trailing dim {d}",
                self.data(b).shape()
            )));
        }
        let bdata = self.data(b).data().to_vec();
        let mut data = self.data(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, bb) in chunk.iter_mut().zip(&bdata) {
                *v += bb;
            }
        }
        let shape = self.data(x).shape().to_vec();
        Ok(self.push(Op::AddBiasLast(x, b), Tensor::new(shape, data)))
    }

    /// Broadcast-multiply by a vector over the trailing axis.
    pub fn mul_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.data(x).shape().last().unwrap();
        if self.data(b).shape() != [d] {
            return Err(Error::Dim(format!(
                "mul_last vector shape {:?} vs trailing dim {d}",
                self.data(b).shape()
            )));
        }
        let bdata = self.data(b).data().to_vec();
        let mut data = self.data(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, bb) in chunk.iter_mut().zip(&bdata) {
                *v *= bb;
            }
        }
        let shape = self.data(x).shape().to_vec();
        Ok(self.push(Op::MulBiasLast(x, b), Tensor::new(shape, data)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        );
        self.push(Op::Relu(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|&v| tensor::sigmoid(v)).collect(),
        );
        self.push(Op::Sigmoid(x), t)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|v| v.abs()).collect(),
        );
        self.push(Op::Abs(x), t)
    }

    /// Elementwise sqrt(x + eps).
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let t = Tensor::new(
            self.data(x).shape().to_vec(),
            self.data(x).data().iter().map(|v| (v + eps).sqrt()).collect(),
        );
        self.push(Op::SqrtEps(x), t)
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let d = *self.data(x).shape().last().unwrap();
        let data = tensor::softmax_last(self.data(x).data(), d);
        let shape = self.data(x).shape().to_vec();
        self.push(Op::SoftmaxLast(x), Tensor::new(shape, data))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let d = *self.data(x).shape().last().unwrap();
        let data = tensor::log_softmax_last(self.data(x).data(), d);
        let shape = self.data(x).shape().to_vec();
        self.push(Op::LogSoftmaxLast(x), Tensor::new(shape, data))
    }

    /// Row-wise layer norm over the trailing axis of an [m, d] tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.data(x).shape().to_vec();
        let d = *s.last().unwrap();
        if self.data(gamma).shape() != [d] || self.data(beta).shape() != [d] {
            return Err(Error::Dim("layer_norm gamma/beta must match trailing dim".into()));
        }
        let g = self.data(gamma).data().to_vec();
        let b = self.data(beta).data().to_vec();
        let mut data = self.data(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = g[i] * (*v - mean) * inv + b[i];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, Tensor::new(s, data)))
    }

    // ── Reductions and shape ops ─────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).numel() as f64;
        let s: f64 = self.data(x).data().iter().sum();
        self.push(Op::MeanAll(x), Tensor::scalar(s / n))
    }

    /// Row sums of an [m, n] tensor -> [m].
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("sum_rows expects rank-2, got {s:?}")));
        }
        let data: Vec<f64> = self.data(x).data().chunks(s[1]).map(|r| r.iter().sum()).collect();
        Ok(self.push(Op::SumRows(x), Tensor::new(vec![s[0]], data)))
    }

    /// Column means of an [m, d] tensor -> [d].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("mean_rows expects rank-2, got {s:?}")));
        }
        let (m, d) = (s[0], s[1]);
        let mut data = vec![0.0; d];
        for row in self.data(x).data().chunks(d) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= m as f64;
        }
        Ok(self.push(Op::MeanRows(x), Tensor::new(vec![d], data)))
    }

    /// Contiguous slice of the flat buffer, reshaped to [len].
    pub fn slice_flat(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.data(x).numel() {
            return Err(Error::Dim(format!(
                "slice {start}..{} out of bounds for {} elements",
                start + len,
                self.data(x).numel()
            )));
        }
        let data = self.data(x).data()[start..start + len].to_vec();
        Ok(self.push(Op::SliceFlat { x, start, len }, Tensor::new(vec![len], data)))
    }

    /// Concatenate flat buffers and reshape to `shape`.
    pub fn concat_flat(&mut self, parts: &[Var], shape: Vec<usize>) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p).data());
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dim(format!(
                "concat_flat shape {shape:?} vs {} elements",
                data.len()
            )));
        }
        Ok(self.push(Op::ConcatFlat(parts.to_vec()), Tensor::new(shape, data)))
    }

    /// Concatenate along the channel axis; inputs must share H and W.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.data(a).shape().to_vec();
        let sb = self.data(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(Error::Dim(format!("concat_channels shapes {sa:?} vs {sb:?}")));
        }
        let (h, w, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        let (da, db) = (self.data(a).data(), self.data(b).data());
        for p in 0..h * w {
            data.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        Ok(self.push(Op::ConcatChannels(a, b), Tensor::new(vec![h, w, ca + cb], data)))
    }

    /// Nearest-neighbour 2x spatial upsampling of [H, W, C].
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dim(format!("upsample2x expects [H,W,C], got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.data(x).data();
        let mut data = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xq in 0..2 * w {
                let sbase = ((y / 2) * w + xq / 2) * c;
                let dbase = (y * 2 * w + xq) * c;
                data[dbase..dbase + c].copy_from_slice(&src[sbase..sbase + c]);
            }
        }
        Ok(self.push(Op::Upsample2x(x), Tensor::new(vec![2 * h, 2 * w, c], data)))
    }

    /// Per-row element pick from an [m, n] tensor -> [m].
    pub fn gather_elems(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.data(x).shape().to_vec();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(Error::Dim(format!("gather_elems shape {s:?} with {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::Dim(format!("gather index {bad} out of {}", s[1])));
        }
        let data: Vec<f64> =
            idx.iter().enumerate().map(|(r, &c)| self.data(x).at2(r, c)).collect();
        Ok(self.push(Op::GatherElems { x, idx }, Tensor::new(vec![s[0]], data)))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.data(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.data(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(grads: &mut [Option<Vec<f64>>], v: Var, numel: usize, add: impl Fn(&mut [f64])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        add(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                Self::accum(grads, *a, self.data(*a).numel(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d += gg;
                    }
                });
                Self::accum(grads, *b, self.data(*b).numel(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d += gg;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, self.data(*a).numel(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d += gg;
                    }
                });
                Self::accum(grads, *b, self.data(*b).numel(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d -= gg;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a).data(), self.data(*b).data());
                Self::accum(grads, *a, da.len(), |s| {
                    for ((d, gg), bv) in s.iter_mut().zip(g).zip(db) {
                        *d += gg * bv;
                    }
                });
                Self::accum(grads, *b, db.len(), |s| {
                    for ((d, gg), av) in s.iter_mut().zip(g).zip(da) {
                        *d += gg * av;
                    }
                });
            }
            Op::Neg(x) => {
                Self::accum(grads, *x, self.data(*x).numel(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d -= gg;
                    }
                });
            }
            Op::ScaleConst(x, c) => {
                let c = *c;
                Self::accum(grads, *x, self.data(*x).numel(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d += c * gg;
                    }
                });
            }
            Op::MulScalarVar(x, sc) => {
                let sv = self.data(*sc).item();
                let xd = self.data(*x).data();
                Self::accum(grads, *x, xd.len(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d += gg * sv;
                    }
                });
                let ds: f64 = g.iter().zip(xd).map(|(gg, xv)| gg * xv).sum();
                Self::accum(grads, *sc, 1, |s| s[0] += ds);
            }
            Op::DivScalarVar(x, sc) => {
                let sv = self.data(*sc).item();
                let xd = self.data(*x).data();
                Self::accum(grads, *x, xd.len(), |s| {
                    for (d, gg) in s.iter_mut().zip(g) {
                        *d += gg / sv;
                    }
                });
                let ds: f64 = g.iter().zip(xd).map(|(gg, xv)| -gg * xv / (sv * sv)).sum();
                Self::accum(grads, *sc, 1, |s| s[0] += ds);
            }
            Op::Matmul(a, b) => {
                let sa = self.data(*a).shape();
                let sb = self.data(*b).shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = tensor::transpose(self.data(*b).data(), k, n);
                let da = tensor::matmul(g, &bt, m, n, k);
                let at = tensor::transpose(self.data(*a).data(), m, k);
                let db = tensor::matmul(&at, g, k, m, n);
                Self::accum(grads, *a, m * k, |s| {
                    for (d, v) in s.iter_mut().zip(&da) {
                        *d += v;
                    }
                });
                Self::accum(grads, *b, k * n, |s| {
                    for (d, v) in s.iter_mut().zip(&db) {
                        *d += v;
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.data(*x).shape();
                let (r, c) = (s[0], s[1]);
                let gt = tensor::transpose(g, c, r);
                Self::accum(grads, *x, r * c, |sl| {
                    for (d, v) in sl.iter_mut().zip(&gt) {
                        *d += v;
                    }
                });
            }
            Op::Conv2d { x, w, k, stride } => {
                let sx = self.data(*x).shape();
                let sw = self.data(*w).shape();
                let (dx, dw) = tensor::conv2d_backward(
                    self.data(*x).data(),
                    sx[0],
                    sx[1],
                    sx[2],
                    self.data(*w).data(),
                    *k,
                    sw[3],
                    *stride,
                    g,
                );
                Self::accum(grads, *x, dx.len(), |s| {
                    for (d, v) in s.iter_mut().zip(&dx) {
                        *d += v;
                    }
                });
                Self::accum(grads, *w, dw.len(), |s| {
                    for (d, v) in s.iter_mut().zip(&dw) {
                        *d += v;
                    }
                });
            }
            Op::AddBiasLast(x, b) => {
                let d = self.data(*b).numel();
                Self::accum(grads, *x, self.data(*x).numel(), |s| {
                    for (dd, gg) in s.iter_mut().zip(g) {
                        *dd += gg;
                    }
                });
                Self::accum(grads, *b, d, |s| {
                    for chunk in g.chunks(d) {
                        for (dd, gg) in s.iter_mut().zip(chunk) {
                            *dd += gg;
                        }
                    }
                });
            }
            Op::MulBiasLast(x, b) => {
                let d = self.data(*b).numel();
                let xd = self.data(*x).data();
                let bd = self.data(*b).data();
                Self::accum(grads, *x, xd.len(), |s| {
                    for (chunk, gchunk) in s.chunks_mut(d).zip(g.chunks(d)) {
                        for ((dd, gg), bb) in chunk.iter_mut().zip(gchunk).zip(bd) {
                            *dd += gg * bb;
                        }
                    }
                });
                Self::accum(grads, *b, d, |s| {
                    for (xchunk, gchunk) in xd.chunks(d).zip(g.chunks(d)) {
                        for ((dd, gg), xv) in s.iter_mut().zip(gchunk).zip(xchunk) {
                            *dd += gg * xv;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x).data();
                Self::accum(grads, *x, xd.len(), |s| {
                    for ((d, gg), xv) in s.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = node.data.data();
                Self::accum(grads, *x, yd.len(), |s| {
                    for ((d, gg), y) in s.iter_mut().zip(g).zip(yd) {
                        *d += gg * y * (1.0 - y);
                    }
                });
            }
            Op::Abs(x) => {
                let xd = self.data(*x).data();
                Self::accum(grads, *x, xd.len(), |s| {
                    for ((d, gg), xv) in s.iter_mut().zip(g).zip(xd) {
                        *d += gg * xv.signum() * if *xv == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::SqrtEps(x) => {
                let yd = node.data.data();
                Self::accum(grads, *x, yd.len(), |s| {
                    for ((d, gg), y) in s.iter_mut().zip(g).zip(yd) {
                        *d += gg / (2.0 * y);
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let d = *node.data.shape().last().unwrap();
                let yd = node.data.data();
                Self::accum(grads, *x, yd.len(), |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(d).zip(g.chunks(d)).zip(yd.chunks(d))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((ds, gg), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *ds += y * (gg - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxLast(x) => {
                let d = *node.data.shape().last().unwrap();
                let yd = node.data.data();
                Self::accum(grads, *x, yd.len(), |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(d).zip(g.chunks(d)).zip(yd.chunks(d))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((ds, gg), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *ds += gg - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.data(*x).shape().last().unwrap();
                let xd = self.data(*x).data();
                let gd = self.data(*gamma).data();
                let nrows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..nrows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                    let mean_gg = gg.iter().sum::<f64>() / d as f64;
                    let mean_ggx =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] += (gg[j] - mean_gg - xhat[j] * mean_ggx) * inv;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                Self::accum(grads, *x, xd.len(), |s| {
                    for (dd, v) in s.iter_mut().zip(&dx) {
                        *dd += v;
                    }
                });
                Self::accum(grads, *gamma, d, |s| {
                    for (dd, v) in s.iter_mut().zip(&dgamma) {
                        *dd += v;
                    }
                });
                Self::accum(grads, *beta, d, |s| {
                    for (dd, v) in s.iter_mut().zip(&dbeta) {
                        *dd += v;
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                Self::accum(grads, *x, self.data(*x).numel(), |s| {
                    for d in s.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.data(*x).numel();
                let gv = g[0] / n as f64;
                Self::accum(grads, *x, n, |s| {
                    for d in s.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumRows(x) => {
                let s = self.data(*x).shape();
                let (m, n) = (s[0], s[1]);
                Self::accum(grads, *x, m * n, |sl| {
                    for r in 0..m {
                        for c in 0..n {
                            sl[r * n + c] += g[r];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let s = self.data(*x).shape();
                let (m, d) = (s[0], s[1]);
                Self::accum(grads, *x, m * d, |sl| {
                    for r in 0..m {
                        for c in 0..d {
                            sl[r * d + c] += g[c] / m as f64;
                        }
                    }
                });
            }
            Op::SliceFlat { x, start, len } => {
                let (start, len) = (*start, *len);
                Self::accum(grads, *x, self.data(*x).numel(), |s| {
                    for (d, gg) in s[start..start + len].iter_mut().zip(g) {
                        *d += gg;
                    }
                });
            }
            Op::ConcatFlat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.data(p).numel();
                    let seg = &g[off..off + n];
                    Self::accum(grads, p, n, |s| {
                        for (d, gg) in s.iter_mut().zip(seg) {
                            *d += gg;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.data(*a).shape();
                let sb = self.data(*b).shape();
                let (hw, ca, cb) = (sa[0] * sa[1], sa[2], sb[2]);
                Self::accum(grads, *a, hw * ca, |s| {
                    for p in 0..hw {
                        for c in 0..ca {
                            s[p * ca + c] += g[p * (ca + cb) + c];
                        }
                    }
                });
                Self::accum(grads, *b, hw * cb, |s| {
                    for p in 0..hw {
                        for c in 0..cb {
                            s[p * cb + c] += g[p * (ca + cb) + ca + c];
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = self.data(*x).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                Self::accum(grads, *x, h * w * c, |sl| {
                    for y in 0..2 * h {
                        for xq in 0..2 * w {
                            let sbase = ((y / 2) * w + xq / 2) * c;
                            let dbase = (y * 2 * w + xq) * c;
                            for cc in 0..c {
                                sl[sbase + cc] += g[dbase + cc];
                            }
                        }
                    }
                });
            }
            Op::GatherElems { x, idx } => {
                let n = self.data(*x).shape()[1];
                Self::accum(grads, *x, self.data(*x).numel(), |s| {
                    for (r, &c) in idx.iter().enumerate() {
                        s[r * n + c] += g[r];
                    }
                });
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Accumulate every mounted parameter's gradient into the set.
    pub fn apply_to(&self, tape: &Tape, ps: &mut ParamSet) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads[i].as_deref() {
                    ps.accumulate_grad(id, g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.range(-1.0, 1.0)).collect())
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let p = tape.param(&ps, id);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        grads.apply_to(&tape, &mut ps);
        assert_eq!(ps.get(id).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_norm_is_value() {
        let mut ps = ParamSet::new();
        let vals = vec![0.5, -1.5, 2.0, 0.0];
        let id = ps.add("p", Tensor::new(vec![4], vals.clone()));
        let mut tape = Tape::new();
        let p = tape.param(&ps, id);
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        grads.apply_to(&tape, &mut ps);
        for (g, v) in ps.get(id).grad.data().iter().zip(&vals) {
            assert!((g - v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got {msg}");
    }

    #[test]
    fn conv_kernel_size_contract() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[4, 4, 2]));
        let w = tape.input(Tensor::zeros(&[5, 5, 2, 2]));
        assert!(matches!(tape.conv2d(x, w, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_and_concat_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y).data(), &[0.0, 2.0]);

        let a = tape.input(Tensor::zeros(&[4, 5, 3]));
        let b = tape.input(Tensor::zeros(&[4, 5, 2]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.data(c).shape(), &[4, 5, 5]);
    }

    #[test]
    fn layer_norm_moments() {
        let mut r = Rng::from_seed(21);
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(&mut r, &[5, 16]));
        let gamma = tape.input(Tensor::full(&[16], 1.0));
        let beta = tape.input(Tensor::zeros(&[16]));
        let y = tape.layer_norm(x, gamma, beta, 1e-9).unwrap();
        for row in tape.data(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn first_non_finite_reports_tag() {
        let mut tape = Tape::new();
        let ok = tape.input(Tensor::zeros(&[2]));
        tape.tag(ok, "clean");
        let bad = tape.input(Tensor::new(vec![2], vec![1.0, f64::NAN]));
        tape.tag(bad, "poisoned");
        let report = tape.first_non_finite().unwrap();
        assert!(report.contains("poisoned"), "got {report}");
    }

    #[test]
    fn gather_elems_forward_backward() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.gather_elems(x, vec![2, 0]).unwrap();
        assert_eq!(tape.data(y).data(), &[3.0, 4.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
