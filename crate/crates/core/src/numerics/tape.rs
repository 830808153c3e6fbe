//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it needs for the backward pass.
//! Nodes are appended in evaluation order, so walking them in reverse is a
//! valid topological order. Gradients are only propagated into nodes whose
//! `requires_grad` flag is set; a subgraph fed only by frozen parameters and
//! plain inputs is skipped entirely during backward.

use serde::{Deserialize, Serialize};

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalization behaviour for a single call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates; running estimates untouched.
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnRunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnRunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [b, c] => (*b, *c, 1),
        [b, c, l] => (*b, *c, *l),
        _ => (0, 0, 0),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the current value of `v` into a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    /// Records an input tensor. Its `requires_grad` flag is honoured.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a model parameter; frozen parameters do not require grad.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(
            p.tensor.data().to_vec(),
            p.tensor.shape().to_vec(),
            p.trainable,
            Op::Leaf,
        )
    }

    /// `y = x · Wᵀ + b` with `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: ws,
                right: bs,
            });
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; batch * fan_out];
        for r in 0..batch {
            let xrow = &xv[r * fan_in..(r + 1) * fan_in];
            let orow = &mut out[r * fan_out..(r + 1) * fan_out];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &wv[o * fan_in..(o + 1) * fan_in];
                *slot = bv[o] + dot(xrow, wrow);
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(out, vec![batch, fan_out], rg, Op::Dense { x, w, b }))
    }

    /// 1-D cross-correlation. `x: [batch, c_in, len]`, `k: [c_out, c_in, width]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[1] != ks[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: xs,
                right: ks,
            });
        }
        if bs != [ks[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv1d bias",
                left: ks,
                right: bs,
            });
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, width) = (ks[0], ks[2]);
        if len + 2 * padding < width {
            return Err(Error::ShapeMismatch {
                op: "conv1d kernel wider than padded input",
                left: xs,
                right: ks,
            });
        }
        let out_len = (len + 2 * padding - width) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[k.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; batch * c_out * out_len];
        let span = c_in * width;
        let mut cols = vec![0.0; out_len * span];
        for n in 0..batch {
            im2col(&xv[n * c_in * len..(n + 1) * c_in * len], c_in, len, width, stride, padding, &mut cols);
            for co in 0..c_out {
                let krow = &kv[co * span..(co + 1) * span];
                let orow = &mut out[(n * c_out + co) * out_len..(n * c_out + co + 1) * out_len];
                for (t, slot) in orow.iter_mut().enumerate() {
                    *slot = bv[co] + dot(krow, &cols[t * span..(t + 1) * span]);
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(k) || self.requires_grad(b);
        Ok(self.push(
            out,
            vec![batch, c_out, out_len],
            rg,
            Op::Conv1d {
                x,
                k,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Batch normalization over `[batch, channels]` or `[batch, channels, len]`.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased variance into `running` with its momentum.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnRunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                left: xs,
                right: vec![running.mean.len()],
            });
        }
        let (batch, ch, len) = dims3(&xs);
        if self.shape(gamma) != [ch]
            || self.shape(beta) != [ch]
            || running.mean.len() != ch
            || running.var.len() != ch
        {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d channels",
                left: xs,
                right: self.shape(gamma).to_vec(),
            });
        }
        if mode == BnMode::Train && batch * len < 2 {
            return Err(Error::invalid(
                "batchnorm1d in train mode needs at least two values per channel",
            ));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let count = (batch * len) as f64;
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        match mode {
            BnMode::Train => {
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * len;
                        mean[c] += xv[base..base + len].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * len;
                        var[c] += xv[base..base + len]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let m = running.momentum;
                for c in 0..ch {
                    let unbiased = var[c] * count / (count - 1.0);
                    running.mean[c] = (1.0 - m) * running.mean[c] + m * mean[c];
                    running.var[c] = (1.0 - m) * running.var[c] + m * unbiased;
                }
            }
            BnMode::Eval => {
                mean.copy_from_slice(&running.mean);
                var.copy_from_slice(&running.var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + running.eps).sqrt()).collect();
        let mut x_hat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..batch {
            for c in 0..ch {
                let base = (n * ch + c) * len;
                for i in base..base + len {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    x_hat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            out,
            xs,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(out, shape, rg, Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.nodes[x.0].value.clone();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape.to_vec(), rg, Op::Reshape { x }))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let batch = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, &[batch, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![total], Vec::new(), rg, Op::Sum { x })
    }

    /// `Σ xᵢ·wᵢ` for a fixed weight vector; handy for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: self.shape(x).to_vec(),
                right: vec![weights.len()],
            });
        }
        let total = dot(&self.nodes[x.0].value, weights);
        let rg = self.requires_grad(x);
        Ok(self.push(
            vec![total],
            Vec::new(),
            rg,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    ///
    /// Uses the log-sum-exp form, so no clamping is needed; the backward pass
    /// is the fused `(p̂ − onehot(y)) / batch`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let lv = &self.nodes[logits.0].value;
        if lv.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_cross_entropy logits"));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            for (c, p) in probs[r * classes..(r + 1) * classes].iter_mut().enumerate() {
                *p = (row[c] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        loss /= batch as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![loss],
            Vec::new(),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let (batch, fan_in) = (xs[0], xs[1]);
                let fan_out = node.shape[1];
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if self.wants(*x) {
                    let dx = slot(grads, *x, xv.len());
                    for r in 0..batch {
                        let drow = &mut dx[r * fan_in..(r + 1) * fan_in];
                        for o in 0..fan_out {
                            let go = g[r * fan_out + o];
                            if go != 0.0 {
                                axpy(go, &wv[o * fan_in..(o + 1) * fan_in], drow);
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = slot(grads, *w, wv.len());
                    for r in 0..batch {
                        let xrow = &xv[r * fan_in..(r + 1) * fan_in];
                        for o in 0..fan_out {
                            let go = g[r * fan_out + o];
                            if go != 0.0 {
                                axpy(go, xrow, &mut dw[o * fan_in..(o + 1) * fan_in]);
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, fan_out);
                    for r in 0..batch {
                        for o in 0..fan_out {
                            db[o] += g[r * fan_out + o];
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                k,
                b,
                stride,
                padding,
            } => {
                let xs = &self.nodes[x.0].shape;
                let ks = &self.nodes[k.0].shape;
                let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
                let (c_out, width) = (ks[0], ks[2]);
                let out_len = node.shape[2];
                let xv = &self.nodes[x.0].value;
                let kv = &self.nodes[k.0].value;
                let want_x = self.wants(*x);
                let want_k = self.wants(*k);
                let mut dx = want_x.then(|| vec![0.0; xv.len()]);
                let mut dk = want_k.then(|| vec![0.0; kv.len()]);
                let span = c_in * width;
                let mut cols = vec![0.0; out_len * span];
                let mut dcols = vec![0.0; out_len * span];
                for n in 0..batch {
                    let xn = &xv[n * c_in * len..(n + 1) * c_in * len];
                    if dk.is_some() {
                        im2col(xn, c_in, len, width, *stride, *padding, &mut cols);
                    }
                    dcols.fill(0.0);
                    for co in 0..c_out {
                        let krow = &kv[co * span..(co + 1) * span];
                        let grow = &g[(n * c_out + co) * out_len..(n * c_out + co + 1) * out_len];
                        for (t, &go) in grow.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            if let Some(dk) = dk.as_mut() {
                                axpy(go, &cols[t * span..(t + 1) * span], &mut dk[co * span..(co + 1) * span]);
                            }
                            if dx.is_some() {
                                axpy(go, krow, &mut dcols[t * span..(t + 1) * span]);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        col2im_add(&dcols, c_in, len, width, *stride, *padding, &mut dx[n * c_in * len..(n + 1) * c_in * len]);
                    }
                }
                if let Some(dx) = dx {
                    add_into(slot(grads, *x, dx.len()), &dx);
                }
                if let Some(dk) = dk {
                    add_into(slot(grads, *k, dk.len()), &dk);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, c_out);
                    for n in 0..batch {
                        for co in 0..c_out {
                            let base = (n * c_out + co) * out_len;
                            db[co] += g[base..base + out_len].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (batch, ch, len) = dims3(&node.shape);
                let gv = &self.nodes[gamma.0].value;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * len;
                        for i in base..base + len {
                            dgamma[c] += g[i] * x_hat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let count = (batch * len) as f64;
                    let dx = slot(grads, *x, g.len());
                    for n in 0..batch {
                        for c in 0..ch {
                            let base = (n * ch + c) * len;
                            let scale = gv[c] * inv_std[c];
                            for i in base..base + len {
                                dx[i] += if *batch_stats {
                                    scale / count
                                        * (count * g[i] - dbeta[c] - x_hat[i] * dgamma[c])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
                if self.wants(*gamma) {
                    add_into(slot(grads, *gamma, ch), &dgamma);
                }
                if self.wants(*beta) {
                    add_into(slot(grads, *beta, ch), &dbeta);
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = &self.nodes[x.0].value;
                    let dx = slot(grads, *x, xv.len());
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.nodes[x.0].value.len();
                    slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    axpy(g[0], weights, slot(grads, *x, weights.len()));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                if self.wants(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch.max(1);
                    let scale = g[0] / batch as f64;
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent lanes let the compiler vectorize the reduction.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds one sample `[c_in, len]` into `[out_len, c_in·width]` patches,
/// zero where a tap falls in the padding.
fn im2col(x: &[f64], c_in: usize, len: usize, width: usize, stride: usize, padding: usize, cols: &mut [f64]) {
    let span = c_in * width;
    for (t, patch) in cols.chunks_mut(span).enumerate() {
        for ci in 0..c_in {
            for j in 0..width {
                let pos = (t * stride + j) as isize - padding as isize;
                patch[ci * width + j] = if pos >= 0 && (pos as usize) < len {
                    x[ci * len + pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im_add(cols: &[f64], c_in: usize, len: usize, width: usize, stride: usize, padding: usize, dx: &mut [f64]) {
    let span = c_in * width;
    for (t, patch) in cols.chunks(span).enumerate() {
        for ci in 0..c_in {
            for j in 0..width {
                let pos = (t * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[ci * len + pos as usize] += patch[ci * width + j];
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(&t(&[3, 3], eye));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
    }

    #[test]
    fn conv1d_unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let data = vec![0.3, -1.0, 2.0, 4.5];
        let x = tape.leaf(&t(&[1, 1, 4], data.clone()));
        let k = tape.leaf(&t(&[1, 1, 1], vec![1.0]));
        let b = tape.leaf(&Tensor::zeros(&[1]));
        let y = tape.conv1d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn conv1d_matches_sliding_window_reference() {
        let ramp: Vec<f64> = (0..8).map(|i| 2.0 * i as f64 + 1.0).collect();
        let kernel = [1.0, 0.0, -1.0];
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 8], ramp.clone()));
        let k = tape.leaf(&t(&[1, 1, 3], kernel.to_vec()));
        let b = tape.leaf(&Tensor::zeros(&[1]));
        let y = tape.conv1d(x, k, b, 1, 0).unwrap();
        let reference: Vec<f64> = ramp
            .windows(3)
            .map(|w| w.iter().zip(kernel).map(|(a, b)| a * b).sum())
            .collect();
        assert_eq!(tape.value(y), reference.as_slice());
        // a ramp with slope 2 against [1, 0, -1] gives a constant -4
        assert!(tape.value(y).iter().all(|&v| v == -4.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3]));
        let w = tape.leaf(&Tensor::zeros(&[4, 5]));
        let b = tape.leaf(&Tensor::zeros(&[4]));
        let err = tape.dense(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 2]));
        let g = tape.leaf(&Tensor::filled(&[2], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let mut rs = BnRunningStats::new(2);
        assert!(tape.batchnorm1d(x, g, b, &mut rs, BnMode::Train).is_err());
        assert!(tape.batchnorm1d(x, g, b, &mut rs, BnMode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_updates_running_stats_with_momentum() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let g = tape.leaf(&Tensor::filled(&[1], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[1]));
        let mut rs = BnRunningStats::new(1);
        tape.batchnorm1d(x, g, b, &mut rs, BnMode::Train).unwrap();
        // batch mean 2.5, unbiased var 5/3
        assert!((rs.mean[0] - 0.25).abs() < 1e-15);
        assert!((rs.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn sum_backward_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::filled(&[2, 3], 0.7).with_requires_grad(true));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::filled(&[3], 1.0).with_requires_grad(true));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::filled(&[2, 2], 1.0));
        let w = tape.leaf(&Tensor::filled(&[3, 2], 0.5).with_requires_grad(true));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(w).unwrap(), &[2.0; 6]);
    }
}
