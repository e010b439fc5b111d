//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in evaluation order. Nodes that do not
//! depend on a parameter or on a gradient-tracking input are marked inert and
//! skipped during the backward sweep, so constants and [`Graph::stop_grad`]
//! outputs act as hard gradient barriers.

use std::collections::BTreeMap;

use crate::tensor::{self, sigmoid, softmax, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Gradients keyed by parameter name, plus per-node gradients for inputs.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn from_params(params: BTreeMap<String, Tensor>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    /// Gradient w.r.t. an arbitrary node, `None` when no gradient reached it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.params {
            match self.params.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.params.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            g.scale_assign(s);
        }
    }
}

/// Sliding-window geometry for [`Graph::im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn output(&self, height: usize, width: usize) -> (usize, usize) {
        ((height + 2 * self.pad - self.k) / self.stride + 1, (width + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// `(tap, source row)` for every in-bounds tap of output cell `(i, j)`.
    fn taps(&self, i: usize, j: usize, height: usize, width: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k;
        (0..k * k).filter_map(move |tap| {
            let y = (i * self.stride + tap / k).checked_sub(self.pad)?;
            let x = (j * self.stride + tap % k).checked_sub(self.pad)?;
            (y < height && x < width).then_some((tap, y * width + x))
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    Im2col { x: Var, height: usize, width: usize, win: Window },
    UpsampleRows { x: Var, height: usize, width: usize },
    UpsampleCols { x: Var, height: usize, width: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    SigmoidBce { logits: Var, targets: Tensor },
    Dice { logits: Var, targets: Tensor },
    KlSoftmax { student: Var, teacher: Tensor, student_probs: Tensor },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

const LN_EPS: f64 = 1e-5;
/// Guard inside the logarithms of the KL divergence.
pub const KL_EPS: f64 = 1e-8;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls with the same name share one node.
    /// Panics if the store lacks `name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = store.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).clone();
        let v = self.push(t, Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameter read as a constant (frozen), so it never receives gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Var {
        let t = store.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).clone();
        self.constant(t)
    }

    /// Copy of `x` that blocks all gradient flow back into `x`.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        let tr = self.tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), tr)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_t(self.value(a), self.value(b));
        let tr = self.tracked(&[a, b]);
        self.push(v, Op::MatMulT(a, b), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let tr = self.tracked(&[a, b]);
        self.push(v, Op::Add(a, b), tr)
    }

    /// Adds a `[1×n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!((1, self.value(a).cols()), b.shape(), "add_row shape mismatch");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b.data()[..cols]) {
                *x += y;
            }
        }
        let tr = self.tracked(&[a, bias]);
        self.push(v, Op::AddRow(a, bias), tr)
    }

    /// `x · W + b` with `W: [in×out]`, `b: [1×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let tr = self.tracked(&[a]);
        self.push(v, Op::Scale(a, s), tr)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let tr = self.tracked(&[a]);
        self.push(v, Op::Relu(a), tr)
    }

    /// Row-wise layer normalisation with affine `[1×n]` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            let orow = out.row_mut(r);
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                orow[c] = xh * g[c] + b[c];
            }
        }
        let tr = self.tracked(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, tr)
    }

    /// Row-wise softmax. Where `mask[r][c]` is `false` the weight is exactly
    /// zero; a row with no allowed entry yields all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), rows * cols, "attention mask shape mismatch");
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let max = (0..cols).filter(|&c| allowed(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let orow = out.row_mut(r);
            let mut z = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    z += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let tr = self.tracked(&[x]);
        self.push(out, Op::SoftmaxRows(x), tr)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).gather_rows(idx);
        let tr = self.tracked(&[x]);
        self.push(v, Op::GatherRows(x, idx.to_vec()), tr)
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows(), idx.len());
        for r in 0..xv.rows() {
            for (o, &c) in idx.iter().enumerate() {
                v.set(r, o, xv.get(r, c));
            }
        }
        let tr = self.tracked(&[x]);
        self.push(v, Op::GatherCols(x, idx.to_vec()), tr)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&ts);
        let tr = self.tracked(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), tr)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols row mismatch");
        let mut v = Tensor::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = v.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let tr = self.tracked(&[a, b]);
        self.push(v, Op::ConcatCols(a, b), tr)
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let idx: Vec<usize> = (start..start + len).collect();
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let v = xv.gather_rows(&idx);
        let tr = self.tracked(&[x]);
        self.push(v, Op::SliceRows(x, start), tr)
    }

    /// Non-overlapping `k×k` patch extraction: `[H·W × C] → [(H/k)(W/k) × k·k·C]`.
    pub fn patchify(&mut self, x: Var, height: usize, width: usize, k: usize) -> Var {
        assert!(height.is_multiple_of(k) && width.is_multiple_of(k), "patchify requires divisible size");
        self.im2col(x, height, width, Window { k, stride: k, pad: 0 })
    }

    /// Zero-padded sliding `k×k` windows: `[H·W × C] → [OH·OW × k·k·C]`
    /// with `OH = (H + 2·pad − k) / stride + 1`. A linear layer on the result
    /// is a convolution.
    pub fn im2col(&mut self, x: Var, height: usize, width: usize, win: Window) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), height * width, "im2col spatial mismatch");
        let (oh, ow) = win.output(height, width);
        let mut v = Tensor::zeros(oh * ow, win.k * win.k * c);
        for i in 0..oh {
            for j in 0..ow {
                let orow = v.row_mut(i * ow + j);
                for (tap, src) in win.taps(i, j, height, width) {
                    orow[tap * c..(tap + 1) * c].copy_from_slice(xv.row(src));
                }
            }
        }
        let tr = self.tracked(&[x]);
        self.push(v, Op::Im2col { x, height, width, win }, tr)
    }

    /// Nearest-neighbour 2× upsampling of a spatial-by-row map `[h·w × D]`.
    pub fn upsample_rows(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), height * width);
        let ow = 2 * width;
        let mut v = Tensor::zeros(4 * height * width, xv.cols());
        for y in 0..2 * height {
            for xx in 0..ow {
                v.row_mut(y * ow + xx).copy_from_slice(xv.row((y / 2) * width + xx / 2));
            }
        }
        let tr = self.tracked(&[x]);
        self.push(v, Op::UpsampleRows { x, height, width }, tr)
    }

    /// Nearest-neighbour 2× upsampling of a spatial-by-column map `[n × h·w]`.
    pub fn upsample_cols(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), height * width);
        let ow = 2 * width;
        let mut v = Tensor::zeros(xv.rows(), 4 * height * width);
        for r in 0..xv.rows() {
            let src = xv.row(r);
            let dst = v.row_mut(r);
            for y in 0..2 * height {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * width + xx / 2];
                }
            }
        }
        let tr = self.tracked(&[x]);
        self.push(v, Op::UpsampleCols { x, height, width }, tr)
    }

    /// Weighted mean of row-wise softmax cross-entropy:
    /// `Σ wᵢ·(−ln softmax(logitsᵢ)[tᵢ]) / Σ wᵢ`. Returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        assert_eq!(lv.rows(), weights.len());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            assert!(targets[r] < row.len(), "target class out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
            probs.row_mut(r).copy_from_slice(&softmax(row));
        }
        let value = if wsum > 0.0 { loss / wsum } else { 0.0 };
        let tr = self.tracked(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        self.push(Tensor::scalar(value), op, tr)
    }

    /// Mean binary cross-entropy with logits over every element.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape());
        let n = lv.len().max(1) as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let tr = self.tracked(&[logits]);
        self.push(Tensor::scalar(loss / n), Op::SigmoidBce { logits, targets: targets.clone() }, tr)
    }

    /// Mean over rows of `1 − (2·Σ σ(x)y + 1) / (Σ σ(x) + Σ y + 1)`.
    pub fn dice(&mut self, logits: Var, targets: &Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape());
        let rows = lv.rows();
        let mut loss = 0.0;
        for r in 0..rows {
            let (num, den) = dice_terms(lv.row(r), targets.row(r));
            loss += 1.0 - (num + 1.0) / (den + 1.0);
        }
        let value = if rows > 0 { loss / rows as f64 } else { 0.0 };
        let tr = self.tracked(&[logits]);
        self.push(Tensor::scalar(value), Op::Dice { logits, targets: targets.clone() }, tr)
    }

    /// Mean over rows of `KL(softmax(teacher) ‖ softmax(student))`.
    /// `teacher` holds logits and is treated as a constant.
    pub fn kl_softmax(&mut self, teacher_logits: &Tensor, student: Var) -> Var {
        let sv = self.value(student);
        assert_eq!(sv.shape(), teacher_logits.shape(), "kl_softmax shape mismatch");
        let rows = sv.rows();
        let mut teacher = Tensor::zeros(rows, sv.cols());
        let mut student_probs = Tensor::zeros(rows, sv.cols());
        let mut loss = 0.0;
        for r in 0..rows {
            let p = softmax(teacher_logits.row(r));
            let q = softmax(sv.row(r));
            loss += kl_terms(&p, &q);
            teacher.row_mut(r).copy_from_slice(&p);
            student_probs.row_mut(r).copy_from_slice(&q);
        }
        let value = if rows > 0 { loss / rows as f64 } else { 0.0 };
        let tr = self.tracked(&[student]);
        self.push(Tensor::scalar(value), Op::KlSoftmax { student, teacher, student_probs }, tr)
    }

    /// `Σ wᵢ·xᵢ` over 1×1 nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let tr = self.tracked(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), tr)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                grads[id] = Some(gout);
                continue;
            }
            self.propagate(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.insert(name.clone(), g.clone());
            }
        }
        Gradients { params, nodes: grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    self.acc(grads, *a, tensor::matmul_t(gout, bv));
                }
                if self.is_tracked(*b) {
                    self.acc(grads, *b, tensor::t_matmul(av, gout));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    self.acc(grads, *a, tensor::matmul(gout, bv));
                }
                if self.is_tracked(*b) {
                    self.acc(grads, *b, tensor::t_matmul(gout, av));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, gout.clone());
                if self.is_tracked(*bias) {
                    let mut gb = Tensor::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (x, y) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *x += y;
                        }
                    }
                    self.acc(grads, *bias, gb);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gout.map(|g| g * s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut g = gout.clone();
                for (gv, &x) in g.data_mut().iter_mut().zip(av.data()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.acc(grads, *a, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = gout.shape();
                let gam = self.value(*gamma).data();
                let mut dg = Tensor::zeros(1, cols);
                let mut db = Tensor::zeros(1, cols);
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gy = gout.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        dg.data_mut()[c] += gy[c] * xh[c];
                        db.data_mut()[c] += gy[c];
                        let d = gy[c] * gam[c];
                        sum_d += d;
                        sum_dx += d * xh[c];
                    }
                    let n = cols as f64;
                    let drow = dx.row_mut(r);
                    for c in 0..cols {
                        let d = gy[c] * gam[c];
                        drow[c] = inv_std[r] / n * (n * d - sum_d - xh[c] * sum_dx);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::SoftmaxRows(x) => {
                let p = &node.value;
                let mut dx = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = gout.row(r);
                    let s: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (pv, gv)) in dx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                        *d = pv * (gv - s);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (d, g) in dx.row_mut(i).iter_mut().zip(gout.row(o)) {
                        *d += g;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GatherCols(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (o, &c) in idx.iter().enumerate() {
                        let cur = dx.get(r, c);
                        dx.set(r, c, cur + gout.get(r, o));
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let idx: Vec<usize> = (start..start + rows).collect();
                    if self.is_tracked(p) {
                        self.acc(grads, p, gout.gather_rows(&idx));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let mut ga = Tensor::zeros(gout.rows(), ac);
                let mut gb = Tensor::zeros(gout.rows(), bc);
                for r in 0..gout.rows() {
                    ga.row_mut(r).copy_from_slice(&gout.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&gout.row(r)[ac..]);
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..gout.rows() {
                    dx.row_mut(start + r).copy_from_slice(gout.row(r));
                }
                self.acc(grads, *x, dx);
            }
            Op::Im2col { x, height, width, win } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let (oh, ow) = win.output(*height, *width);
                let mut dx = Tensor::zeros(xv.rows(), c);
                for i in 0..oh {
                    for j in 0..ow {
                        let grow = gout.row(i * ow + j);
                        for (tap, src) in win.taps(i, j, *height, *width) {
                            for (d, g) in dx.row_mut(src).iter_mut().zip(&grow[tap * c..(tap + 1) * c]) {
                                *d += g;
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::UpsampleRows { x, height, width } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let ow = 2 * width;
                for y in 0..2 * height {
                    for xx in 0..ow {
                        let dst = (y / 2) * width + xx / 2;
                        for (d, g) in dx.row_mut(dst).iter_mut().zip(gout.row(y * ow + xx)) {
                            *d += g;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::UpsampleCols { x, height, width } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let ow = 2 * width;
                for r in 0..xv.rows() {
                    let g = gout.row(r);
                    let d = dx.row_mut(r);
                    for y in 0..2 * height {
                        for xx in 0..ow {
                            d[(y / 2) * width + xx / 2] += g[y * ow + xx];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let g = gout.item();
                let wsum: f64 = weights.iter().sum();
                let mut dx = probs.clone();
                for r in 0..dx.rows() {
                    let scale = if wsum > 0.0 { g * weights[r] / wsum } else { 0.0 };
                    let row = dx.row_mut(r);
                    row[targets[r]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.acc(grads, *logits, dx);
            }
            Op::SigmoidBce { logits, targets } => {
                let lv = self.value(*logits);
                let n = lv.len().max(1) as f64;
                let g = gout.item() / n;
                let mut dx = lv.clone();
                for (d, (&x, &y)) in dx.data_mut().iter_mut().zip(lv.data().iter().zip(targets.data())) {
                    *d = g * (sigmoid(x) - y);
                }
                self.acc(grads, *logits, dx);
            }
            Op::Dice { logits, targets } => {
                let lv = self.value(*logits);
                let rows = lv.rows();
                let g = gout.item() / rows.max(1) as f64;
                let mut dx = Tensor::zeros(lv.rows(), lv.cols());
                for r in 0..rows {
                    let (num, den) = dice_terms(lv.row(r), targets.row(r));
                    let d1 = den + 1.0;
                    let drow = dx.row_mut(r);
                    for (c, (&x, &y)) in lv.row(r).iter().zip(targets.row(r)).enumerate() {
                        let s = sigmoid(x);
                        let ds = -(2.0 * y * d1 - (num + 1.0)) / (d1 * d1);
                        drow[c] = g * ds * s * (1.0 - s);
                    }
                }
                self.acc(grads, *logits, dx);
            }
            Op::KlSoftmax { student, teacher, student_probs } => {
                let rows = teacher.rows();
                let g = gout.item() / rows.max(1) as f64;
                let mut dx = Tensor::zeros(rows, teacher.cols());
                for r in 0..rows {
                    let p = teacher.row(r);
                    let q = student_probs.row(r);
                    // dL/dq_j = -p_j / (q_j + eps); chain through the softmax Jacobian.
                    let dq: Vec<f64> = p.iter().zip(q).map(|(pj, qj)| -pj / (qj + KL_EPS)).collect();
                    let s: f64 = dq.iter().zip(q).map(|(a, b)| a * b).sum();
                    for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = g * q[k] * (dq[k] - s);
                    }
                }
                self.acc(grads, *student, dx);
            }
            Op::WeightedSum(terms) => {
                let g = gout.item();
                for &(v, w) in terms {
                    self.acc(grads, v, Tensor::scalar(g * w));
                }
            }
        }
    }
}

fn dice_terms(logits: &[f64], targets: &[f64]) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in logits.iter().zip(targets) {
        let s = sigmoid(x);
        num += 2.0 * s * y;
        den += s + y;
    }
    (num, den)
}

/// `Σ p (ln(p+ε) − ln(q+ε))`.
pub fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&pj, &qj)| pj * ((pj + KL_EPS).ln() - (qj + KL_EPS).ln())).sum()
}
