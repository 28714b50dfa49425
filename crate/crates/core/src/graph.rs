//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for the backward pass. Parameter
//! leaves borrow their matrices from the owning [`crate::nn::ParamSet`] and
//! carry a [`ParamKey`]; their gradients are collected per key so that two
//! networks (teacher and student) can share one tape.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one parameter matrix of one network on a shared tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub tag: u32,
    pub index: usize,
}

/// Which keys a query row may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    /// Row `i` sees keys `0..=i`.
    Causal,
    /// `allowed[i][j]` is true when query `i` may attend to key `j`.
    Explicit(Vec<Vec<bool>>),
}

impl AttentionMask {
    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::Causal => j <= i,
            AttentionMask::Explicit(allowed) => allowed[i][j],
        }
    }

    fn check_shape(&self, tq: usize, tk: usize) -> Result<()> {
        if let AttentionMask::Explicit(allowed) = self {
            if allowed.len() != tq || allowed.iter().any(|r| r.len() != tk) {
                return Err(Error::Shape(format!("attention mask must be {tq}x{tk}")));
            }
        }
        Ok(())
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<Matrix>,
    },
    Fusion {
        query: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        weights: Matrix,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    BroadcastRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
        floor: f64,
    },
    SquaredError(Var, Var),
    BceWithLogits {
        logits: Var,
        targets: Matrix,
        weights: Matrix,
    },
    SmoothL1 {
        pred: Var,
        targets: Matrix,
        weights: Matrix,
    },
    Sum(Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    param: Option<ParamKey>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Result of a backward sweep.
pub struct Gradients {
    params: BTreeMap<ParamKey, Matrix>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&Matrix> {
        self.params.get(&key)
    }

    /// Gradient of a non-parameter node (if anything flowed into it).
    pub fn node(&self, var: Var) -> Option<&Matrix> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.params.keys()
    }

    /// Dense per-index gradients for one tag; absent entries are zero.
    pub fn for_tag(&self, tag: u32, shapes: &[(usize, usize)]) -> Vec<Matrix> {
        shapes
            .iter()
            .enumerate()
            .map(|(index, &(r, c))| {
                self.params
                    .get(&ParamKey { tag, index })
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(r, c))
            })
            .collect()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'p Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is differentiated but not a parameter (used for input gradients).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            param: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, key: ParamKey, value: &'p Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: Some(key),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter leaf that is read but never receives gradient (frozen network).
    pub fn frozen_param(&mut self, value: &'p Matrix) -> Var {
        self.constant_ref(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x·w + b` with `b` a `1×out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            out.add_row(self.value(b).row(0));
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let value = self.value(a);
        assert_eq!(value.shape(), mask.shape(), "mask shape mismatch");
        let data = value
            .as_slice()
            .iter()
            .zip(mask.as_slice())
            .map(|(x, m)| x * m)
            .collect();
        let out = Matrix::from_vec(value.rows(), value.cols(), data);
        self.push(out, Op::MulConst(a, mask), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Per-row layer normalization with learned `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut out = normalized.clone();
        for r in 0..rows {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`,
    /// split into `heads` column blocks. Returns the concatenated head outputs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.shape();
        let tk = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != tk {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(mask) = mask {
            mask.check_shape(tq, tk)?;
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(tq, d);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut w = Matrix::zeros(tq, tk);
            for i in 0..tq {
                let qi = &qv.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for j in 0..tk {
                    let allowed = mask.map_or(true, |m| m.allows(i, j));
                    let s = if allowed {
                        any = true;
                        dot(qi, &kv.row(j)[cols.clone()]) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    w.set(i, j, s);
                    if s > max {
                        max = s;
                    }
                }
                if !any {
                    return Err(Error::FullyMasked { row: i });
                }
                let row = w.row_mut(i);
                let mut total = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
                let out_row = &mut out.row_mut(i)[cols.clone()];
                for j in 0..tk {
                    let p = w.get(i, j);
                    if p == 0.0 {
                        continue;
                    }
                    for (o, val) in out_row.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += p * val;
                    }
                }
            }
            weights.push(w);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Per-head `T_q×T_k` weights of an attention node.
    pub fn attention_weights(&self, var: Var) -> Option<&[Matrix]> {
        match &self.nodes[var.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Per-position single-head attention across a small set of branch vectors.
    ///
    /// Row `t` of the output is `Σ_j α_tj · values[j][t]` with
    /// `α_t = softmax_j(query[t]·keys[j][t] / √d)`.
    pub fn fusion(&mut self, query: Var, keys: &[Var], values: &[Var]) -> Result<Var> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::Shape("fusion needs one key per value branch".into()));
        }
        let qv = self.value(query);
        let (t, d) = qv.shape();
        for (&k, &v) in keys.iter().zip(values) {
            if self.value(k).shape() != (t, d) || self.value(v).shape() != (t, d) {
                return Err(Error::Shape("fusion branch shape mismatch".into()));
            }
        }
        let n = keys.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut weights = Matrix::zeros(t, n);
        let mut out = Matrix::zeros(t, d);
        for i in 0..t {
            let scores: Vec<f64> = keys
                .iter()
                .map(|&k| dot(qv.row(i), self.value(k).row(i)) * scale)
                .collect();
            let alpha = crate::tensor::softmax(&scores);
            for (j, &a) in alpha.iter().enumerate() {
                weights.set(i, j, a);
                for (o, val) in out.row_mut(i).iter_mut().zip(self.value(values[j]).row(i)) {
                    *o += a * val;
                }
            }
        }
        let mut inputs = vec![query];
        inputs.extend_from_slice(keys);
        inputs.extend_from_slice(values);
        Ok(self.push(
            out,
            Op::Fusion {
                query,
                keys: keys.to_vec(),
                values: values.to_vec(),
                weights,
            },
            &inputs,
        ))
    }

    /// `T×n` branch weights of a fusion node.
    pub fn fusion_weights(&self, var: Var) -> Option<&Matrix> {
        match &self.nodes[var.0].op {
            Op::Fusion { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat row mismatch");
                out.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
                offset += src.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.cols(), "slice out of range");
        let out = Matrix::from_fn(src.rows(), len, |r, c| src.get(r, start + c));
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select_rows(rows);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Repeat a `1×d` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.rows(), 1, "broadcast_rows expects a single row");
        let out = Matrix::from_fn(n, src.cols(), |_, c| src.get(0, c));
        self.push(out, Op::BroadcastRows(x), &[x])
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
            return Err(Error::OutOfVocabulary {
                id: bad,
                size: t.rows(),
            });
        }
        let out = t.select_rows(ids);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Unfold a `T×C` sequence into `T×(kernel·C)` windows with zero "same" padding.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Var {
        let src = self.value(x);
        let (t, c) = src.shape();
        let pad = kernel / 2;
        let mut out = Matrix::zeros(t, kernel * c);
        for i in 0..t {
            for j in 0..kernel {
                let s = i + j;
                if s < pad || s - pad >= t {
                    continue;
                }
                out.row_mut(i)[j * c..(j + 1) * c].copy_from_slice(src.row(s - pad));
            }
        }
        self.push(out, Op::Im2Col { x, kernel }, &[x])
    }

    /// `−Σ_t Σ_y targets[t][y] · ln max(softmax(logits[t])[y], floor)` as a `1×1` node.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix, floor: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "target shape mismatch");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let p = crate::tensor::softmax(lv.row(r));
            for (y, (&py, &ty)) in p.iter().zip(targets.row(r)).enumerate() {
                if ty != 0.0 {
                    total -= ty * py.max(floor).ln();
                }
                probs.set(r, y, py);
            }
        }
        self.push(
            Matrix::filled(1, 1, total),
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
                floor,
            },
            &[logits],
        )
    }

    /// `Σ_rows mean_cols (a − b)²` as a `1×1` node.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "squared_error shape mismatch");
        let total = av.sub(bv).sum_squares() / av.cols() as f64;
        self.push(Matrix::filled(1, 1, total), Op::SquaredError(a, b), &[a, b])
    }

    /// Weighted binary cross entropy on logits, `1×1`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix, weights: Matrix) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "bce shape mismatch");
        assert_eq!(lv.shape(), weights.shape(), "bce weight shape mismatch");
        let total: f64 = lv
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .zip(weights.as_slice())
            .map(|((&z, &y), &w)| w * bce_logit(z, y))
            .sum();
        self.push(
            Matrix::filled(1, 1, total),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            &[logits],
        )
    }

    /// Weighted smooth-L1 (β = 1), `1×1`.
    pub fn smooth_l1(&mut self, pred: Var, targets: Matrix, weights: Matrix) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), targets.shape(), "smooth_l1 shape mismatch");
        let total: f64 = pv
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .zip(weights.as_slice())
            .map(|((&p, &t), &w)| w * smooth_l1(p - t))
            .sum();
        self.push(
            Matrix::filled(1, 1, total),
            Op::SmoothL1 {
                pred,
                targets,
                weights,
            },
            &[pred],
        )
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        self.push(out, Op::Sum(parts.to_vec()), parts)
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut params = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
            if let Some(key) = node.param {
                params
                    .entry(key)
                    .and_modify(|acc: &mut Matrix| acc.add_assign(&g))
                    .or_insert_with(|| g.clone());
            }
            grads[idx] = Some(g);
        }
        Gradients {
            params,
            nodes: grads,
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Linear { x, w, b } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.matmul_t(self.value(*w)));
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, self.value(*x).t_matmul(g));
                }
                if let Some(b) = b {
                    let sums = g.column_sums();
                    self.accumulate(grads, *b, Matrix::from_vec(1, sums.len(), sums));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::MulConst(a, mask) => {
                let data = g
                    .as_slice()
                    .iter()
                    .zip(mask.as_slice())
                    .map(|(x, m)| x * m)
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Relu(a) => {
                let input = self.value(*a);
                let data = g
                    .as_slice()
                    .iter()
                    .zip(input.as_slice())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = self.value(*gain).row(0);
                if self.wants(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.as_mut_slice()[c] += g.get(r, c) * normalized.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let sums = g.column_sums();
                    self.accumulate(grads, *bias, Matrix::from_vec(1, cols, sums));
                }
                if self.wants(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv[c]).collect();
                        let xhat = normalized.row(r);
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, xhat) / n;
                        for c in 0..cols {
                            dx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xhat[c] * mean_dx));
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, d) = qv.shape();
                let tk = kv.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(tq, d);
                let mut dk = Matrix::zeros(tk, d);
                let mut dv = Matrix::zeros(tk, d);
                for (h, w) in weights.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..tq {
                        let go = &g.row(i)[cols.clone()];
                        let mut dp = vec![0.0; tk];
                        let mut weighted = 0.0;
                        for j in 0..tk {
                            let p = w.get(i, j);
                            if p == 0.0 {
                                continue;
                            }
                            dp[j] = dot(go, &vv.row(j)[cols.clone()]);
                            weighted += p * dp[j];
                            for (dvv, gov) in dv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                                *dvv += p * gov;
                            }
                        }
                        for j in 0..tk {
                            let p = w.get(i, j);
                            if p == 0.0 {
                                continue;
                            }
                            let ds = p * (dp[j] - weighted) * scale;
                            let krow = &kv.row(j)[cols.clone()];
                            for (dqv, kvv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(krow) {
                                *dqv += ds * kvv;
                            }
                            let qrow = &qv.row(i)[cols.clone()];
                            for (dkv, qvv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qrow) {
                                *dkv += ds * qvv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Fusion {
                query,
                keys,
                values,
                weights,
            } => {
                let qv = self.value(*query);
                let (t, d) = qv.shape();
                let n = keys.len();
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = Matrix::zeros(t, d);
                let mut dks: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(t, d)).collect();
                let mut dvs: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(t, d)).collect();
                for i in 0..t {
                    let go = g.row(i);
                    let da: Vec<f64> = values
                        .iter()
                        .map(|&v| dot(go, self.value(v).row(i)))
                        .collect();
                    let weighted: f64 = (0..n).map(|j| weights.get(i, j) * da[j]).sum();
                    for j in 0..n {
                        let a = weights.get(i, j);
                        for (dvv, gov) in dvs[j].row_mut(i).iter_mut().zip(go) {
                            *dvv += a * gov;
                        }
                        let ds = a * (da[j] - weighted) * scale;
                        let krow = self.value(keys[j]).row(i);
                        for (dqv, kv) in dq.row_mut(i).iter_mut().zip(krow) {
                            *dqv += ds * kv;
                        }
                        for (dkv, qvv) in dks[j].row_mut(i).iter_mut().zip(qv.row(i)) {
                            *dkv += ds * qvv;
                        }
                    }
                }
                self.accumulate(grads, *query, dq);
                for (k, dk) in keys.iter().zip(dks) {
                    self.accumulate(grads, *k, dk);
                }
                for (v, dv) in values.iter().zip(dvs) {
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let part = Matrix::from_fn(g.rows(), c, |r, cc| g.get(r, offset + cc));
                        self.accumulate(grads, p, part);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectRows { x, rows } => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BroadcastRows(x) => {
                let sums = g.column_sums();
                self.accumulate(grads, *x, Matrix::from_vec(1, sums.len(), sums));
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (d, gv) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Im2Col { x, kernel } => {
                let src = self.value(*x);
                let (t, c) = src.shape();
                let pad = kernel / 2;
                let mut dx = Matrix::zeros(t, c);
                for i in 0..t {
                    for j in 0..*kernel {
                        let s = i + j;
                        if s < pad || s - pad >= t {
                            continue;
                        }
                        let window = &g.row(i)[j * c..(j + 1) * c];
                        for (d, gv) in dx.row_mut(s - pad).iter_mut().zip(window) {
                            *d += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
                floor,
            } => {
                let upstream = g.get(0, 0);
                let (rows, cols) = probs.shape();
                let mut dl = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let p = probs.row(r);
                    let t = targets.row(r);
                    let active: f64 = p
                        .iter()
                        .zip(t)
                        .filter(|(&py, _)| py >= *floor)
                        .map(|(_, &ty)| ty)
                        .sum();
                    for c in 0..cols {
                        let own = if p[c] >= *floor { t[c] } else { 0.0 };
                        dl.set(r, c, upstream * (active * p[c] - own));
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::SquaredError(a, b) => {
                let upstream = g.get(0, 0);
                let (av, bv) = (self.value(*a), self.value(*b));
                let factor = 2.0 * upstream / av.cols() as f64;
                let diff = av.sub(bv).scale(factor);
                if self.wants(*b) {
                    self.accumulate(grads, *b, diff.scale(-1.0));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let upstream = g.get(0, 0);
                let lv = self.value(*logits);
                let data = lv
                    .as_slice()
                    .iter()
                    .zip(targets.as_slice())
                    .zip(weights.as_slice())
                    .map(|((&z, &y), &w)| upstream * w * (sigmoid(z) - y))
                    .collect();
                self.accumulate(grads, *logits, Matrix::from_vec(lv.rows(), lv.cols(), data));
            }
            Op::SmoothL1 {
                pred,
                targets,
                weights,
            } => {
                let upstream = g.get(0, 0);
                let pv = self.value(*pred);
                let data = pv
                    .as_slice()
                    .iter()
                    .zip(targets.as_slice())
                    .zip(weights.as_slice())
                    .map(|((&p, &t), &w)| {
                        let d = p - t;
                        let slope = if d.abs() < 1.0 { d } else { d.signum() };
                        upstream * w * slope
                    })
                    .collect();
                self.accumulate(grads, *pred, Matrix::from_vec(pv.rows(), pv.cols(), data));
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone());
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy of a logit against a target in `[0, 1]`.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Matrix) -> f64, at: &Matrix, step: f64) -> Matrix {
        let mut out = Matrix::zeros(at.rows(), at.cols());
        for i in 0..at.len() {
            let mut plus = at.clone();
            plus.as_mut_slice()[i] += step;
            let mut minus = at.clone();
            minus.as_mut_slice()[i] -= step;
            out.as_mut_slice()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out
    }

    fn pseudo_random(rows: usize, cols: usize, salt: u64) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| {
            let x = ((r * 31 + c * 17) as u64 + salt * 101) as f64;
            (x * 0.618_033_988_7).fract() * 2.0 - 1.0
        })
    }

    /// Checks d(loss)/d(input) of a single-input expression against central differences.
    fn check_unary(build: &dyn Fn(&mut Graph, Var) -> Var, input: Matrix) {
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let x = g.input(m.clone());
            let y = build(&mut g, x);
            g.value(y).get(0, 0)
        };
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.node(x).unwrap().clone();
        let numeric = numeric_grad(&eval, &input, 1e-6);
        assert!(
            analytic.max_abs_diff(&numeric) < 1e-6,
            "analytic {analytic:?} numeric {numeric:?}"
        );
    }

    fn readout(g: &mut Graph, y: Var) -> Var {
        let (r, c) = g.value(y).shape();
        let weights = g.constant(pseudo_random(r, c, 99));
        let target = g.constant(Matrix::zeros(r, c));
        let mixed = g.add(y, weights);
        let sq = g.squared_error(mixed, target);
        g.scale(sq, 0.5)
    }

    #[test]
    fn layer_norm_gradient() {
        check_unary(
            &|g, x| {
                let gain = g.constant(pseudo_random(1, 5, 3));
                let bias = g.constant(pseudo_random(1, 5, 4));
                let y = g.layer_norm(x, gain, bias);
                readout(g, y)
            },
            pseudo_random(3, 5, 1),
        );
    }

    #[test]
    fn attention_gradient_through_all_inputs() {
        for mask in [None, Some(AttentionMask::Causal)] {
            let mask = mask.clone();
            check_unary(
                &move |g, x| {
                    let wk = g_const(g, 4, 4, 8);
                    let wv = g_const(g, 4, 4, 9);
                    let k = g.linear(x, wk, None);
                    let v = g.linear(x, wv, None);
                    let y = g.attention(x, k, v, 2, mask.as_ref()).unwrap();
                    readout(g, y)
                },
                pseudo_random(3, 4, 2),
            );
        }
    }

    fn g_const(g: &mut Graph, r: usize, c: usize, salt: u64) -> Var {
        g.constant(pseudo_random(r, c, salt))
    }

    #[test]
    fn fusion_gradient() {
        check_unary(
            &|g, x| {
                let w1 = g_const(g, 4, 4, 11);
                let w2 = g_const(g, 4, 4, 12);
                let k1 = g.linear(x, w1, None);
                let k2 = g.relu(x);
                let v2 = g.linear(x, w2, None);
                let y = g.fusion(x, &[k1, k2], &[x, v2]).unwrap();
                readout(g, y)
            },
            pseudo_random(3, 4, 5),
        );
    }

    #[test]
    fn structural_ops_gradient() {
        check_unary(
            &|g, x| {
                let a = g.im2col(x, 3);
                let b = g.slice_cols(a, 1, 4);
                let c = g.select_rows(b, &[2, 0, 2]);
                let row = g.select_rows(x, &[1]);
                let bc = g.broadcast_rows(row, 3);
                let cat = g.concat_cols(&[c, bc]);
                let soft = pseudo_random(3, 7, 7).map(f64::abs);
                let ce = g.soft_cross_entropy(cat, soft, 1e-12);
                let labels = pseudo_random(3, 7, 8).map(|v| (v + 1.0) / 2.0);
                let bce = g.bce_with_logits(cat, labels, Matrix::filled(3, 7, 0.5));
                let reg = pseudo_random(3, 7, 9).scale(3.0);
                let sl = g.smooth_l1(cat, reg, Matrix::filled(3, 7, 1.0));
                g.sum(&[ce, bce, sl])
            },
            pseudo_random(4, 3, 6),
        );
    }

    #[test]
    fn gather_scatters_into_table() {
        let table = pseudo_random(4, 2, 1);
        let mut g = Graph::new();
        let t = g.param(ParamKey { tag: 0, index: 0 }, &table);
        let rows = g.gather(t, &[1, 1, 3]).unwrap();
        let target = g.constant(Matrix::zeros(3, 2));
        let loss = g.squared_error(rows, target);
        let grads = g.backward(loss);
        let dt = grads.param(ParamKey { tag: 0, index: 0 }).unwrap();
        assert_eq!(dt.row(0), &[0.0, 0.0]);
        assert!((dt.get(1, 0) - 2.0 * table.get(1, 0)).abs() < 1e-12);
        assert!(matches!(g.gather(t, &[4]), Err(Error::OutOfVocabulary { id: 4, size: 4 })));
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let q = g.constant(Matrix::zeros(2, 2));
        let mask = AttentionMask::Explicit(vec![vec![true, false], vec![false, false]]);
        let err = g.attention(q, q, q, 1, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 1 }));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let w = pseudo_random(2, 2, 1);
        let mut g = Graph::new();
        let x = g.input(pseudo_random(1, 2, 2));
        let wv = g.frozen_param(&w);
        let y = g.linear(x, wv, None);
        let z = g.constant(Matrix::zeros(1, 2));
        let loss = g.squared_error(y, z);
        let grads = g.backward(loss);
        assert!(grads.node(wv).is_none());
        assert!(grads.node(x).is_some());
        assert_eq!(grads.keys().count(), 0);
    }
}
