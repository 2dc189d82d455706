//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. Nodes are appended in evaluation order, so reverse creation order
//! is a valid topological order for the backward sweep.

use std::collections::HashMap;

use super::conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    conv2d_quant, conv_out_len, ConvGeometry,
};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::{ExecMode, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::mult::QuantScheme;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    /// 3×3 window with "same" padding.
    pub fn same3(stride: usize) -> Self {
        PoolGeometry {
            kernel: 3,
            stride,
            padding: 1,
        }
    }
}

/// Batch-norm statistics source.
pub enum BnMode<'a> {
    /// Normalize with batch statistics, optionally folding them into running
    /// estimates (`running = (1 - momentum)·running + momentum·batch`).
    Train {
        running: Option<(&'a mut [f64], &'a mut [f64])>,
        momentum: f64,
    },
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeometry,
    },
    Add(Vec<Var>),
    Scale(Var, f64),
    WeightedSum {
        inputs: Vec<Option<Var>>,
        weights: Var,
        offset: usize,
    },
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    Shift(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SampleMask {
        input: Var,
        mask: Vec<f64>,
    },
    StraightThrough {
        surrogate: Var,
    },
    Dot {
        input: Var,
        coeffs: Vec<f64>,
    },
    Constant,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Add(_) => "add",
            Op::Scale(..) => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SoftmaxRows(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Shift(_) => "shift",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SampleMask { .. } => "sample_mask",
            Op::StraightThrough { .. } => "straight_through",
            Op::Dot { .. } => "dot",
            Op::Constant => "constant",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    trainable: [bool; 2],
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn group_slot(group: ParamGroup) -> usize {
    match group {
        ParamGroup::Weight => 0,
        ParamGroup::Arch => 1,
    }
}

impl Graph {
    /// A graph that tracks gradients for every parameter group.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            trainable: [true, true],
            param_nodes: HashMap::new(),
        }
    }

    /// A graph that tracks gradients only for parameters in `groups`.
    pub fn trainable(groups: &[ParamGroup]) -> Self {
        let mut g = Self::new();
        g.trainable = [false, false];
        for &grp in groups {
            g.trainable[group_slot(grp)] = true;
        }
        g
    }

    /// A graph that records no gradient information.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g.trainable = [false, false];
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Sets whether newly created op nodes track gradients and returns the
    /// previous setting. Parameters keep their trainability.
    pub fn set_grad_enabled(&mut self, enabled: bool) -> bool {
        std::mem::replace(&mut self.grad_enabled, enabled)
    }

    /// Runs `f` with gradient tracking disabled; nodes created inside never
    /// require gradients.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.grad_enabled, false);
        let out = f(self);
        self.grad_enabled = prev;
        out
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input (images, labels-derived tensors).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = store.get(id);
        let requires_grad = self.trainable[group_slot(p.group)];
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        mode: &ExecMode,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = bias.map(|b| self.value(b));
        let out = match mode {
            ExecMode::Fp32Exact => conv2d_forward(x, w, b, geom)?,
            ExecMode::Quant8(m) => conv2d_quant(x, w, b, geom, m, QuantScheme::Asymmetric)?.output,
        };
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )?;
        self.push(out, Op::Relu(x), &[x])
    }

    /// Per-channel normalization over batch and spatial positions.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: BnMode<'_>,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        for p in gamma.iter().chain(beta.iter()) {
            if self.value(*p).numel() != c {
                return Err(shape_err!(
                    "batchnorm affine parameter must have {c} values"
                ));
            }
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let batch_stats = matches!(mode, BnMode::Train { .. });
        match &mode {
            BnMode::Train { .. } => {
                for b in 0..n {
                    for ch in 0..c {
                        mean[ch] += xd[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        var[ch] += xd[(b * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
            }
            BnMode::Eval { mean: m, var: v } => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err!("running statistics must have {c} channels"));
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let gamma_v = gamma.map(|g| self.value(g).data().to_vec());
        let beta_v = beta.map(|b| self.value(b).data().to_vec());
        let mut out = xhat.clone();
        if gamma_v.is_some() || beta_v.is_some() {
            for (i, o) in out.iter_mut().enumerate() {
                let ch = (i / plane) % c;
                if let Some(g) = &gamma_v {
                    *o *= g[ch];
                }
                if let Some(bv) = &beta_v {
                    *o += bv[ch];
                }
            }
        }
        if let BnMode::Train {
            running: Some((rm, rv)),
            momentum,
        } = mode
        {
            let unbias = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            for ch in 0..c {
                rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean[ch];
                rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var[ch] * unbias;
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        self.push(
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &parents,
        )
    }

    pub fn max_pool(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let oh = conv_out_len(h, geom.kernel, geom.stride, geom.padding, 1)?;
        let ow = conv_out_len(w, geom.kernel, geom.stride, geom.padding, 1)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..][..h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for_window(h, w, i, j, geom, |idx| {
                        if src[idx] > best {
                            best = src[idx];
                            at = idx;
                        }
                    });
                    if at == usize::MAX {
                        return Err(shape_err!("pooling window without valid input"));
                    }
                    let o = (plane * oh + i) * ow + j;
                    out[o] = best;
                    argmax[o] = plane * h * w + at;
                }
            }
        }
        self.push(
            Tensor::new([n, c, oh, ow], out)?,
            Op::MaxPool { input: x, argmax },
            &[x],
        )
    }

    /// Average pooling over the valid (unpadded) part of each window.
    pub fn avg_pool(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let oh = conv_out_len(h, geom.kernel, geom.stride, geom.padding, 1)?;
        let ow = conv_out_len(w, geom.kernel, geom.stride, geom.padding, 1)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..][..h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let (mut sum, mut cnt) = (0.0, 0usize);
                    for_window(h, w, i, j, geom, |idx| {
                        sum += src[idx];
                        cnt += 1;
                    });
                    if cnt == 0 {
                        return Err(shape_err!("pooling window without valid input"));
                    }
                    out[(plane * oh + i) * ow + j] = sum / cnt as f64;
                }
            }
        }
        self.push(
            Tensor::new([n, c, oh, ow], out)?,
            Op::AvgPool { input: x, geom },
            &[x],
        )
    }

    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err!("add needs at least one input"))?;
        let mut out = self.value(first).clone();
        for &v in &xs[1..] {
            let t = self.value(v);
            if t.shape() != out.shape() {
                return Err(shape_err!(
                    "cannot add {:?} and {:?}",
                    out.shape(),
                    t.shape()
                ));
            }
            out.add_assign(t);
        }
        self.push(out, Op::Add(xs.to_vec()), xs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a * factor).collect(),
        )?;
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// `Σ_k weights[offset + k] · inputs[k]`; `None` inputs are identically
    /// zero and are skipped.
    pub fn weighted_sum(
        &mut self,
        inputs: &[Option<Var>],
        weights: Var,
        offset: usize,
    ) -> Result<Var> {
        let wv = self.value(weights).data();
        if offset + inputs.len() > wv.len() {
            return Err(shape_err!("weighted_sum reads past the weight tensor"));
        }
        let shape = inputs
            .iter()
            .flatten()
            .next()
            .map(|&v| self.value(v).shape().to_vec())
            .ok_or_else(|| shape_err!("weighted_sum needs at least one non-zero input"))?;
        let mut out = vec![0.0; shape.iter().product()];
        for (k, x) in inputs.iter().enumerate() {
            if let Some(x) = x {
                let t = self.value(*x);
                if t.shape() != shape.as_slice() {
                    return Err(shape_err!(
                        "weighted_sum inputs {:?} vs {:?}",
                        t.shape(),
                        shape
                    ));
                }
                let c = wv[offset + k];
                for (o, a) in out.iter_mut().zip(t.data()) {
                    *o += c * a;
                }
            }
        }
        let mut parents: Vec<Var> = inputs.iter().flatten().copied().collect();
        parents.push(weights);
        self.push(
            Tensor::new(shape, out)?,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
                offset,
            },
            &parents,
        )
    }

    /// Row-wise softmax of a rank-2 tensor, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let [r, k] = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            softmax_into(&xd[i * k..][..k], &mut out[i * k..][..k]);
        }
        self.push(Tensor::new([r, k], out)?, Op::SoftmaxRows(x), &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .dims4()?;
        let [n, _, h, w] = first;
        let mut total_c = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err!(
                    "concat of {:?} with {:?}",
                    first,
                    self.value(v).shape()
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..][..c * plane]);
            }
        }
        self.push(
            Tensor::new([n, total_c, h, w], out)?,
            Op::Concat(xs.to_vec()),
            xs,
        )
    }

    /// `y[i, j] = x[i + 1, j + 1]`, zero past the bottom/right border.
    pub fn shift(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..h.saturating_sub(1) {
                for j in 0..w.saturating_sub(1) {
                    out[base + i * w + j] = xd[base + (i + 1) * w + j + 1];
                }
            }
        }
        self.push(Tensor::new([n, c, h, w], out)?, Op::Shift(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(Tensor::new([n, c], out)?, Op::GlobalAvgPool(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `x · Wᵀ + b` with `x: [n, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, fin] = self.value(x).dims2()?;
        let [fout, win] = self.value(weight).dims2()?;
        if win != fin {
            return Err(shape_err!("linear weight expects {win} inputs, got {fin}"));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != fout {
                return Err(shape_err!("linear bias must have {fout} values"));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            let row = &xd[i * fin..][..fin];
            for o in 0..fout {
                out[i * fout + o] = row
                    .iter()
                    .zip(&wd[o * fin..][..fin])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += bd[i % fout];
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            Tensor::new([n, fout], out)?,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
            &parents,
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err!("label {bad} out of range for {k} classes"));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            softmax_into(&ld[i * k..][..k], &mut probs[i * k..][..k]);
            let row = &ld[i * k..][..k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
        }
        loss /= n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Multiplies every element of sample `b` by `mask[b]`.
    pub fn sample_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if mask.len() != n {
            return Err(shape_err!("mask has {} entries for batch {n}", mask.len()));
        }
        let per = t.numel() / n.max(1);
        let out = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * mask[i / per])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::SampleMask { input: x, mask }, &[x])
    }

    /// Takes its value from `value` and sends its gradient to `surrogate`.
    pub fn straight_through(&mut self, surrogate: Var, value: Var) -> Result<Var> {
        if self.shape(surrogate) != self.shape(value) {
            return Err(shape_err!(
                "straight-through shapes differ: {:?} vs {:?}",
                self.shape(surrogate),
                self.shape(value)
            ));
        }
        let out = self.value(value).clone();
        self.push(out, Op::StraightThrough { surrogate }, &[surrogate])
    }

    /// Scalar `Σ coeffs[i]·x[i]`.
    pub fn dot(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if coeffs.len() != t.numel() {
            return Err(shape_err!(
                "dot with {} coefficients for {} values",
                coeffs.len(),
                t.numel()
            ));
        }
        let s = t.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot { input: x, coeffs }, &[x])
    }

    /// A constant with no gradient path.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, &[])
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), 1.0);
        self.backward_from(loss, seed)
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `output`.
    pub fn backward_from(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        if upstream.shape() != self.shape(output) {
            return Err(shape_err!(
                "upstream gradient {:?} for output {:?}",
                upstream.shape(),
                self.shape(output)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(upstream);
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.param_nodes.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param | Op::Constant => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                if self.wants(*input) {
                    accumulate(
                        grads,
                        *input,
                        conv2d_backward_input(dy, w, x.shape(), *geom)?,
                    );
                }
                if self.wants(*weight) {
                    accumulate(
                        grads,
                        *weight,
                        conv2d_backward_weight(dy, x, w.shape(), *geom)?,
                    );
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, conv2d_backward_bias(dy)?);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = dy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = dy.dims4()?;
                let plane = h * w;
                let m = (n * plane) as f64;
                let dyd = dy.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (i, (&g, &xh)) in dyd.iter().zip(xhat).enumerate() {
                    let ch = (i / plane) % c;
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * xh;
                }
                if let Some(b) = beta.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, Tensor::new([c], sum_dy.clone())?);
                }
                if let Some(g) = gamma.filter(|g| self.wants(*g)) {
                    accumulate(grads, g, Tensor::new([c], sum_dy_xhat.clone())?);
                }
                if self.wants(*input) {
                    let gamma_v: Vec<f64> = match gamma {
                        Some(g) => self.value(*g).data().to_vec(),
                        None => vec![1.0; c],
                    };
                    let mut dx = vec![0.0; dyd.len()];
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = (i / plane) % c;
                        let scale = gamma_v[ch] * inv_std[ch];
                        *d = if *batch_stats {
                            scale * (dyd[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                        } else {
                            scale * dyd[i]
                        };
                    }
                    accumulate(grads, *input, Tensor::new([n, c, h, w], dx)?);
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.wants(*input) {
                    let mut dx = Tensor::zeros(self.shape(*input).to_vec());
                    let dxd = dx.data_mut();
                    for (&at, &g) in argmax.iter().zip(dy.data()) {
                        dxd[at] += g;
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::AvgPool { input, geom } => {
                if self.wants(*input) {
                    let [n, c, h, w] = self.value(*input).dims4()?;
                    let [_, _, oh, ow] = dy.dims4()?;
                    let mut dx = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let dst = &mut dx[plane * h * w..][..h * w];
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut cnt = 0usize;
                                for_window(h, w, i, j, *geom, |_| cnt += 1);
                                let g = dy.data()[(plane * oh + i) * ow + j] / cnt as f64;
                                for_window(h, w, i, j, *geom, |idx| dst[idx] += g);
                            }
                        }
                    }
                    accumulate(grads, *input, Tensor::new([n, c, h, w], dx)?);
                }
            }
            Op::Add(xs) => {
                for &x in xs {
                    if self.wants(x) {
                        accumulate(grads, x, dy.clone());
                    }
                }
            }
            Op::Scale(x, k) => {
                if self.wants(*x) {
                    let dx = dy.data().iter().map(|g| g * k).collect();
                    accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
                }
            }
            Op::WeightedSum {
                inputs,
                weights,
                offset,
            } => {
                let wv = self.value(*weights);
                let mut dw = if self.wants(*weights) {
                    Some(Tensor::zeros(wv.shape().to_vec()))
                } else {
                    None
                };
                for (k, x) in inputs.iter().enumerate() {
                    let Some(x) = x else { continue };
                    if self.wants(*x) {
                        let c = wv.data()[offset + k];
                        let dx = dy.data().iter().map(|g| g * c).collect();
                        accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xv = self.value(*x);
                        dw.data_mut()[offset + k] =
                            dy.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *weights, dw);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let [r, k] = node.value.dims2()?;
                    let y = node.value.data();
                    let mut dx = vec![0.0; r * k];
                    for i in 0..r {
                        let yr = &y[i * k..][..k];
                        let gr = &dy.data()[i * k..][..k];
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dx[i * k + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(grads, *x, Tensor::new([r, k], dx)?);
                }
            }
            Op::Concat(xs) => {
                let [n, total_c, h, w] = dy.dims4()?;
                let plane = h * w;
                let mut start = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            dx.extend_from_slice(
                                &dy.data()[(b * total_c + start) * plane..][..c * plane],
                            );
                        }
                        accumulate(grads, x, Tensor::new([n, c, h, w], dx)?);
                    }
                    start += c;
                }
            }
            Op::Shift(x) => {
                if self.wants(*x) {
                    let [n, c, h, w] = dy.dims4()?;
                    let mut dx = vec![0.0; dy.numel()];
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for i in 0..h.saturating_sub(1) {
                            for j in 0..w.saturating_sub(1) {
                                dx[base + (i + 1) * w + j + 1] += dy.data()[base + i * w + j];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let [n, c, h, w] = self.value(*x).dims4()?;
                    let plane = h * w;
                    let mut dx = vec![0.0; n * c * plane];
                    for (p, &g) in dy.data().iter().enumerate() {
                        dx[p * plane..][..plane].fill(g / plane as f64);
                    }
                    accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.clone().reshape(self.shape(*x).to_vec())?);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let [n, fin] = self.value(*input).dims2()?;
                let fout = dy.shape()[1];
                let dyd = dy.data();
                if self.wants(*input) {
                    let wd = self.value(*weight).data();
                    let mut dx = vec![0.0; n * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let g = dyd[i * fout + o];
                            for (d, &wv) in
                                dx[i * fin..][..fin].iter_mut().zip(&wd[o * fin..][..fin])
                            {
                                *d += g * wv;
                            }
                        }
                    }
                    accumulate(grads, *input, Tensor::new([n, fin], dx)?);
                }
                if self.wants(*weight) {
                    let xd = self.value(*input).data();
                    let mut dw = vec![0.0; fout * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let g = dyd[i * fout + o];
                            for (d, &xv) in
                                dw[o * fin..][..fin].iter_mut().zip(&xd[i * fin..][..fin])
                            {
                                *d += g * xv;
                            }
                        }
                    }
                    accumulate(grads, *weight, Tensor::new([fout, fin], dw)?);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; fout];
                    for i in 0..n {
                        for o in 0..fout {
                            db[o] += dyd[i * fout + o];
                        }
                    }
                    accumulate(grads, b, Tensor::new([fout], db)?);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let [n, k] = self.value(*logits).dims2()?;
                    let g = dy.data()[0] / n as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * g).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * k + l] -= g;
                    }
                    accumulate(grads, *logits, Tensor::new([n, k], dx)?);
                }
            }
            Op::SampleMask { input, mask } => {
                if self.wants(*input) {
                    let n = mask.len();
                    let per = dy.numel() / n.max(1);
                    let dx = dy
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * mask[i / per])
                        .collect();
                    accumulate(grads, *input, Tensor::new(dy.shape().to_vec(), dx)?);
                }
            }
            Op::StraightThrough { surrogate } => {
                if self.wants(*surrogate) {
                    accumulate(grads, *surrogate, dy.clone());
                }
            }
            Op::Dot { input, coeffs } => {
                if self.wants(*input) {
                    let g = dy.data()[0];
                    let dx = coeffs.iter().map(|c| c * g).collect();
                    accumulate(grads, *input, Tensor::new(self.shape(*input).to_vec(), dx)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Calls `f` with the in-plane index of every valid input under output
/// position `(i, j)`, in row-major window order.
#[inline]
fn for_window(
    h: usize,
    w: usize,
    i: usize,
    j: usize,
    geom: PoolGeometry,
    mut f: impl FnMut(usize),
) {
    let top = (i * geom.stride) as isize - geom.padding as isize;
    let left = (j * geom.stride) as isize - geom.padding as isize;
    for di in 0..geom.kernel as isize {
        let r = top + di;
        if r < 0 || r >= h as isize {
            continue;
        }
        for dj in 0..geom.kernel as isize {
            let c = left + dj;
            if c < 0 || c >= w as isize {
                continue;
            }
            f(r as usize * w + c as usize);
        }
    }
}

/// Gradients produced by one backward sweep, retained for leaves and
/// parameters.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}
