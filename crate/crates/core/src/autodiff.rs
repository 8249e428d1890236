//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Var`] carries its value and, when it depends on a trainable
//! parameter, the index of the tape node that produced it. Operations
//! whose inputs are all constants are evaluated eagerly and never touch
//! the tape, so activations of frozen layers are released as soon as the
//! caller drops them. Only the sub-graph downstream of trainable
//! parameters is retained for the backward pass.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Identifies a parameter as `(layer index, name)`. Projection-head
/// parameters use names prefixed with `head.`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub name: &'static str,
}

impl ParamId {
    pub const fn new(layer: usize, name: &'static str) -> Self {
        ParamId { layer, name }
    }

    pub fn is_head(&self) -> bool {
        self.name.starts_with("head.")
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.layer, self.name)
    }
}

pub type Gradients = BTreeMap<ParamId, Tensor>;

/// Multiply-add counts of matrix products, two FLOPs per multiply-add.
/// Elementwise work is not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub forward: u64,
    pub backward: u64,
}

#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

enum Op {
    Leaf(ParamId),
    MatMul { lhs: Option<Tensor>, rhs: Option<Tensor>, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Add { rhs_shape: Vec<usize> },
    Mul { lhs: Option<Tensor>, rhs: Option<Tensor>, rhs_shape: Vec<usize> },
    Scale(f32),
    Gelu(Tensor),
    Relu(Tensor),
    LayerNorm { xhat: Tensor, rstd: Tensor, gamma: Tensor },
    Softmax(Tensor),
    SoftmaxXent { probs: Tensor, labels: Vec<usize> },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    MeanTokens { input_shape: Vec<usize> },
    Concat { rows: Vec<usize> },
    L2Normalize { y: Tensor, norms: Tensor },
}

struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
}

/// Smallest norm used when normalizing rows.
pub const NORM_FLOOR: f32 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: FlopCount,
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Checks that `rhs` is either the same shape as `lhs`, a single value, or
/// matches the trailing dimensions of `lhs`.
fn broadcast_len(lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    let rhs_len: usize = rhs.iter().product();
    if lhs == rhs || rhs_len == 1 {
        return Ok(rhs_len);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(rhs_len);
    }
    Err(Error::Dimension(format!("cannot broadcast {rhs:?} onto {lhs:?}")))
}

fn sum_to(grad: &Tensor, shape: &[usize], len: usize) -> Tensor {
    let mut out = vec![0.0f32; len];
    for chunk in grad.data().chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += *g;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, slope)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<Option<usize>>, value: Tensor) -> Var {
        if inputs.iter().all(Option::is_none) {
            return Var { value, node: None };
        }
        self.nodes.push(Node { op, inputs });
        Var { value, node: Some(self.nodes.len() - 1) }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        Var { value, node: None }
    }

    /// A trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf(id), inputs: Vec::new() });
        Var { value, node: Some(self.nodes.len() - 1) }
    }

    /// Matrix product. `a` is `[.., m, k]`; `b` is either a shared `[k, n]`
    /// matrix applied to every leading row of `a`, or a batch `[B, k, n]`
    /// matching `a = [B, m, k]`.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || Error::Dimension(format!("matmul shapes {sa:?} and {sb:?} do not align"));
        if sa.len() < 2 {
            return Err(mismatch());
        }
        let (batch, m, k, n, shared_rhs, out_shape) = match sb.len() {
            2 => {
                let k = sa[sa.len() - 1];
                if k != sb[0] {
                    return Err(mismatch());
                }
                let m: usize = sa[..sa.len() - 1].iter().product();
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(sb[1]);
                (1, m, k, sb[1], true, shape)
            }
            3 => {
                if sa.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0f32; batch * m * n];
        let (ad, bd) = (a.value.data(), b.value.data());
        for s in 0..batch {
            let bs = if shared_rhs { bd } else { &bd[s * k * n..(s + 1) * k * n] };
            gemm_nn(&ad[s * m * k..(s + 1) * m * k], bs, &mut out[s * m * n..(s + 1) * m * n], m, k, n);
        }
        self.flops.forward += 2 * (batch * m * k * n) as u64;
        let value = finite("matmul", Tensor::from_parts(out_shape, out))?;
        let op = Op::MatMul {
            lhs: b.node.map(|_| a.value.clone()),
            rhs: a.node.map(|_| b.value.clone()),
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        Ok(self.push(op, vec![a.node, b.node], value))
    }

    /// `a + b` with `b` the same shape, a scalar, or a trailing-row broadcast.
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let rhs_len = broadcast_len(a.shape(), b.shape())?;
        let bd = b.value.data();
        let data: Vec<f32> = a.value.data().iter().enumerate().map(|(i, &x)| x + bd[i % rhs_len]).collect();
        let value = finite("add", Tensor::from_parts(a.shape().to_vec(), data))?;
        Ok(self.push(Op::Add { rhs_shape: b.shape().to_vec() }, vec![a.node, b.node], value))
    }

    /// Elementwise `a * b`, broadcasting `b` like [`Tape::add`].
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let rhs_len = broadcast_len(a.shape(), b.shape())?;
        let bd = b.value.data();
        let data: Vec<f32> = a.value.data().iter().enumerate().map(|(i, &x)| x * bd[i % rhs_len]).collect();
        let value = finite("mul", Tensor::from_parts(a.shape().to_vec(), data))?;
        let op = Op::Mul {
            lhs: b.node.map(|_| a.value.clone()),
            rhs: a.node.map(|_| b.value.clone()),
            rhs_shape: b.shape().to_vec(),
        };
        Ok(self.push(op, vec![a.node, b.node], value))
    }

    pub fn scale(&mut self, a: &Var, factor: f32) -> Result<Var> {
        let value = finite("scale", a.value.map(|x| x * factor))?;
        Ok(self.push(Op::Scale(factor), vec![a.node], value))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: &Var) -> Result<Var> {
        let value = finite("gelu", a.value.map(|x| gelu_parts(x).0))?;
        let saved = a.node.map(|_| a.value.clone());
        Ok(match saved {
            Some(x) => self.push(Op::Gelu(x), vec![a.node], value),
            None => Var { value, node: None },
        })
    }

    pub fn relu(&mut self, a: &Var) -> Result<Var> {
        let value = finite("relu", a.value.map(|x| x.max(0.0)))?;
        if a.node.is_none() {
            return Ok(Var { value, node: None });
        }
        let saved = value.clone();
        Ok(self.push(Op::Relu(saved), vec![a.node], value))
    }

    /// Normalizes over the last dimension, then applies `gamma` and `beta`.
    pub fn layernorm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
        let shape = x.shape();
        let d = *shape.last().expect("tensors have rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layernorm over width {d} got gamma {:?} and beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.value.numel() / d;
        let (g, b) = (gamma.value.data(), beta.value.data());
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in x.value.data().chunks(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = finite("layernorm", Tensor::from_parts(shape.to_vec(), out))?;
        let inputs = vec![x.node, gamma.node, beta.node];
        if inputs.iter().all(Option::is_none) {
            return Ok(Var { value, node: None });
        }
        let op = Op::LayerNorm {
            xhat: Tensor::from_parts(shape.to_vec(), xhat),
            rstd: Tensor::from_parts(vec![rows], rstd),
            gamma: gamma.value.clone(),
        };
        Ok(self.push(op, inputs, value))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: &Var) -> Result<Var> {
        let d = *x.shape().last().expect("rank >= 1");
        let mut out = Vec::with_capacity(x.value.numel());
        for row in x.value.data().chunks(d) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let start = out.len();
            let mut sum = 0.0f32;
            for v in row {
                let e = (v - max).exp();
                sum += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= sum;
            }
        }
        let value = finite("softmax", Tensor::from_parts(x.shape().to_vec(), out))?;
        if x.node.is_none() {
            return Ok(Var { value, node: None });
        }
        let saved = value.clone();
        Ok(self.push(Op::Softmax(saved), vec![x.node], value))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[b×c]`.
    pub fn softmax_cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross-entropy expects [b, c] logits for {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let c = shape[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = Vec::with_capacity(logits.value.numel());
        let mut total = 0.0f64;
        for (row, &label) in logits.value.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += f64::from(log_z - row[label]);
            probs.extend(row.iter().map(|v| (v - max).exp() / sum));
        }
        let loss = (total / labels.len() as f64) as f32;
        let value = finite("softmax_cross_entropy", Tensor::scalar(loss))?;
        if logits.node.is_none() {
            return Ok(Var { value, node: None });
        }
        let op = Op::SoftmaxXent { probs: Tensor::from_parts(shape.to_vec(), probs), labels: labels.to_vec() };
        Ok(self.push(op, vec![logits.node], value))
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let value = x.value.reshape(shape)?;
        Ok(self.push(Op::Reshape(x.shape().to_vec()), vec![x.node], value))
    }

    pub fn permute(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let value = x.value.permute(axes)?;
        Ok(self.push(Op::Permute(axes.to_vec()), vec![x.node], value))
    }

    /// Mean over the middle axis of `[b, t, d]`, giving `[b, d]`.
    pub fn mean_tokens(&mut self, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("mean_tokens expects [b, t, d], got {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let mut out = vec![0.0f32; b * d];
        for (i, sample) in x.value.data().chunks(t * d).enumerate() {
            let acc = &mut out[i * d..(i + 1) * d];
            for token in sample.chunks(d) {
                for (o, v) in acc.iter_mut().zip(token) {
                    *o += *v;
                }
            }
            for o in acc.iter_mut() {
                *o /= t as f32;
            }
        }
        let value = finite("mean_tokens", Tensor::from_parts(vec![b, d], out))?;
        Ok(self.push(Op::MeanTokens { input_shape: shape.to_vec() }, vec![x.node], value))
    }

    /// Stacks 2-D inputs along rows.
    pub fn concat_rows(&mut self, parts: &[&Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let cols = first.shape().get(1).copied().unwrap_or(0);
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            if p.shape().len() != 2 || p.shape()[1] != cols {
                return Err(Error::Dimension(format!("concat expects [*, {cols}] parts, got {:?}", p.shape())));
            }
            rows.push(p.shape()[0]);
            data.extend_from_slice(p.value.data());
        }
        let total = rows.iter().sum();
        let value = Tensor::from_parts(vec![total, cols], data);
        Ok(self.push(Op::Concat { rows }, parts.iter().map(|p| p.node).collect(), value))
    }

    /// Scales each row of `[b, k]` to unit L2 norm; norms below
    /// [`NORM_FLOOR`] are clamped.
    pub fn l2_normalize(&mut self, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("l2_normalize expects [b, k], got {shape:?}")));
        }
        let k = shape[1];
        let mut norms = Vec::with_capacity(shape[0]);
        let mut out = Vec::with_capacity(x.value.numel());
        for row in x.value.data().chunks(k) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(NORM_FLOOR);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = finite("l2_normalize", Tensor::from_parts(shape.to_vec(), out))?;
        if x.node.is_none() {
            return Ok(Var { value, node: None });
        }
        let op = Op::L2Normalize { y: value.clone(), norms: Tensor::from_parts(vec![shape[0]], norms) };
        Ok(self.push(op, vec![x.node], value))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for trainable
    /// parameter leaves only.
    pub fn backward(&mut self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        let mut result = Gradients::new();
        let Some(root) = loss.node else {
            return Ok(result);
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(loss.shape(), 1.0));
        for idx in (0..=root).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf(id) = node.op {
                match result.get_mut(&id) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        result.insert(id, grad);
                    }
                }
                continue;
            }
            let input_grads = backprop(&node.op, &node.inputs, grad, &mut self.flops);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(g)) = (input, g) {
                    match &mut grads[*i] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        if result.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(result)
    }
}

/// Gradients for each input of `op` given the output gradient. Consumes
/// `grad` so elementwise rules can reuse its storage.
fn backprop(op: &Op, inputs: &[Option<usize>], mut grad: Tensor, flops: &mut FlopCount) -> Vec<Option<Tensor>> {
    let wants = |i: usize| inputs.get(i).is_some_and(Option::is_some);
    match op {
        Op::Leaf(_) => Vec::new(),
        Op::MatMul { lhs, rhs, batch, m, k, n, shared_rhs } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let g = grad.data();
            let cost = 2 * (batch * m * k * n) as u64;
            let da = rhs.as_ref().map(|b| {
                flops.backward += cost;
                let bd = b.data();
                let mut out = vec![0.0f32; batch * m * k];
                for s in 0..batch {
                    let bs = if *shared_rhs { bd } else { &bd[s * k * n..(s + 1) * k * n] };
                    gemm_nt(&g[s * m * n..(s + 1) * m * n], bs, &mut out[s * m * k..(s + 1) * m * k], m, n, k);
                }
                let shape = match shared_rhs {
                    true => {
                        let mut s = grad.shape()[..grad.shape().len() - 1].to_vec();
                        s.push(k);
                        s
                    }
                    false => vec![batch, m, k],
                };
                Tensor::from_parts(shape, out)
            });
            let db = lhs.as_ref().map(|a| {
                flops.backward += cost;
                let ad = a.data();
                if *shared_rhs {
                    let mut out = vec![0.0f32; k * n];
                    gemm_tn(ad, g, &mut out, k, m, n);
                    Tensor::from_parts(vec![k, n], out)
                } else {
                    let mut out = vec![0.0f32; batch * k * n];
                    for s in 0..batch {
                        gemm_tn(
                            &ad[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut out[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    Tensor::from_parts(vec![batch, k, n], out)
                }
            });
            vec![da, db]
        }
        Op::Add { rhs_shape } => {
            let db = wants(1).then(|| reduce_to(grad.clone(), rhs_shape));
            vec![wants(0).then_some(grad), db]
        }
        Op::Mul { lhs, rhs, rhs_shape } => {
            let da = rhs.as_ref().map(|b| {
                let bd = b.data();
                let len = bd.len();
                let data = grad.data().iter().enumerate().map(|(i, g)| g * bd[i % len]).collect();
                Tensor::from_parts(grad.shape().to_vec(), data)
            });
            let db = lhs
                .as_ref()
                .map(|a| reduce_to(grad.zip_map(a, |g, x| g * x).expect("shapes checked in forward"), rhs_shape));
            vec![da, db]
        }
        Op::Scale(factor) => {
            grad.data_mut().iter_mut().for_each(|g| *g *= factor);
            vec![Some(grad)]
        }
        Op::Gelu(x) => {
            for (g, &x) in grad.data_mut().iter_mut().zip(x.data()) {
                *g *= gelu_parts(x).1;
            }
            vec![Some(grad)]
        }
        Op::Relu(y) => {
            for (g, &y) in grad.data_mut().iter_mut().zip(y.data()) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
            vec![Some(grad)]
        }
        Op::LayerNorm { xhat, rstd, gamma } => {
            let d = gamma.numel();
            let (h, gm) = (xhat.data(), gamma.data());
            let dgamma = wants(1).then(|| {
                let mut out = vec![0.0f32; d];
                for (gr, hr) in grad.data().chunks(d).zip(h.chunks(d)) {
                    for j in 0..d {
                        out[j] += gr[j] * hr[j];
                    }
                }
                Tensor::from_parts(vec![d], out)
            });
            let dbeta = wants(2).then(|| sum_to(&grad, &[d], d));
            let dx = wants(0).then(|| {
                for ((gr, hr), &r) in grad.data_mut().chunks_mut(d).zip(h.chunks(d)).zip(rstd.data()) {
                    let mut mean_gy = 0.0f32;
                    let mut mean_gyh = 0.0f32;
                    for j in 0..d {
                        let gy = gr[j] * gm[j];
                        mean_gy += gy;
                        mean_gyh += gy * hr[j];
                    }
                    mean_gy /= d as f32;
                    mean_gyh /= d as f32;
                    for j in 0..d {
                        gr[j] = r * (gr[j] * gm[j] - mean_gy - hr[j] * mean_gyh);
                    }
                }
                grad
            });
            vec![dx, dgamma, dbeta]
        }
        Op::Softmax(y) => {
            let d = *y.shape().last().expect("rank >= 1");
            for (gr, yr) in grad.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: f32 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for (g, y) in gr.iter_mut().zip(yr) {
                    *g = y * (*g - dot);
                }
            }
            vec![Some(grad)]
        }
        Op::SoftmaxXent { probs, labels } => {
            let c = probs.shape()[1];
            let scale = grad.item() / labels.len() as f32;
            let mut out = probs.data().to_vec();
            for (row, &label) in out.chunks_mut(c).zip(labels) {
                row[label] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![Some(Tensor::from_parts(probs.shape().to_vec(), out))]
        }
        Op::Reshape(shape) => vec![Some(grad.reshape(shape).expect("same numel"))],
        Op::Permute(axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            vec![Some(grad.permute(&inverse).expect("valid permutation"))]
        }
        Op::MeanTokens { input_shape } => {
            let (t, d) = (input_shape[1], input_shape[2]);
            let mut out = Vec::with_capacity(input_shape.iter().product());
            for row in grad.data().chunks(d) {
                for _ in 0..t {
                    out.extend(row.iter().map(|g| g / t as f32));
                }
            }
            vec![Some(Tensor::from_parts(input_shape.clone(), out))]
        }
        Op::Concat { rows } => {
            let cols = grad.shape()[1];
            let mut offset = 0;
            rows.iter()
                .enumerate()
                .map(|(i, &r)| {
                    let part = wants(i).then(|| {
                        Tensor::from_parts(vec![r, cols], grad.data()[offset * cols..(offset + r) * cols].to_vec())
                    });
                    offset += r;
                    part
                })
                .collect()
        }
        Op::L2Normalize { y, norms } => {
            let k = y.shape()[1];
            for ((gr, yr), &norm) in grad.data_mut().chunks_mut(k).zip(y.data().chunks(k)).zip(norms.data()) {
                let dot: f32 = if norm > NORM_FLOOR { gr.iter().zip(yr).map(|(g, y)| g * y).sum() } else { 0.0 };
                for (g, y) in gr.iter_mut().zip(yr) {
                    *g = (*g - y * dot) / norm;
                }
            }
            vec![Some(grad)]
        }
    }
}

fn reduce_to(grad: Tensor, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    if len == grad.numel() {
        return grad.reshape(shape).expect("same numel");
    }
    sum_to(&grad, shape, len)
}
