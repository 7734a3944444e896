//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value and enough of
//! its inputs to run the backward pass. Nodes are stored in creation order,
//! which is already a topological order, so `backward` is a single reverse
//! sweep. Gradients reaching a node from several consumers are summed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{
    gelu, gelu_grad, matmul_nt_into, matmul_tn_into, softmax_in_place, Tensor,
};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation tags, used for reporting and for the fault-injection hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Sum,
    FocalLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Sum,
        OpKind::FocalLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::FocalLoss => "focal_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    FocalLoss {
        logits: Var,
        label: usize,
        alpha_t: f64,
        gamma: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Sum(_) => OpKind::Sum,
            Op::FocalLoss { .. } => OpKind::FocalLoss,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Slice { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::FocalLoss { logits, .. } => vec![*logits],
        }
    }

    fn shift(&mut self, offset: usize) {
        let s = |v: &mut Var| v.0 += offset;
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                s(a);
                s(b);
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Slice { x, .. } => s(x),
            Op::LayerNorm { x, gain, bias, .. } => {
                s(x);
                s(gain);
                s(bias);
            }
            Op::Concat { parts, .. } => parts.iter_mut().for_each(s),
            Op::FocalLoss { logits, .. } => s(logits),
        }
    }
}

/// One recorded value: forward result, accumulated gradient and provenance.
#[derive(Debug, Clone)]
pub struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: the backward rule of `kind` is deliberately scaled by 1.5
    /// so verification harnesses can prove they notice.
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            fault: Some(kind),
            ..Self::default()
        }
    }

    /// Empty tape sharing this tape's fault setting.
    pub fn sibling(&self) -> Tape {
        Tape {
            fault: self.fault,
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient; zeros if nothing has flowed into `v` yet.
    pub fn grad(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<ParamId>) -> Result<Var> {
        let kind = op.kind();
        value.check_finite(kind.name())?;
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients but is not tied to a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.constant(value);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf for a stored parameter; reused for repeated lookups on this tape.
    /// Frozen parameters enter as constants, so their gradients are dropped.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.constant(store.get(id).clone());
        if !store.is_frozen(id) {
            let node = &mut self.nodes[v.0];
            node.requires_grad = true;
            node.param = Some(id);
        }
        self.param_leaves.insert(id, v);
        v
    }

    /// Move every node of `other` onto this tape. Returns a function that
    /// maps `other`'s handles to their new positions.
    pub fn append(&mut self, other: Tape) -> impl Fn(Var) -> Var {
        let offset = self.nodes.len();
        for mut node in other.nodes {
            node.op.shift(offset);
            self.nodes.push(node);
        }
        move |v: Var| Var(v.0 + offset)
    }

    /// Sum the gradients of all parameter leaves into `grads`.
    pub fn collect_grads(&self, grads: &mut Grads) {
        for n in &self.nodes {
            if let (Some(id), Some(g)) = (n.param, &n.grad) {
                grads.accumulate(id, g);
            }
        }
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), None)
    }

    /// `x[..×d] + bias[d]`, the bias repeated over every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = *xv.shape().last().unwrap();
        if bv.shape() != [d] {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddRow(x, bias), None)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), None)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), None)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), None)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_lastdim();
        self.push(out, Op::Softmax(x), None)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape("layer_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            None,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            None,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice(axis, start, len)?;
        self.push(out, Op::Slice { x, axis, start }, None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), None)
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x), None)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), None)
    }

    /// `-alpha_t (1 - p)^gamma ln p` with `p = softmax(logits)[label]`,
    /// `p` clamped below at 1e-12.
    pub fn focal_loss(&mut self, logits: Var, label: usize, alpha_t: f64, gamma: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 || label >= lv.numel() {
            return Err(Error::invalid(
                "focal_loss",
                format!("label {label} for logits of shape {:?}", lv.shape()),
            ));
        }
        let mut probs = lv.data().to_vec();
        softmax_in_place(&mut probs);
        let p = probs[label].max(P_FLOOR);
        let loss = -alpha_t * (1.0 - p).powf(gamma) * p.ln();
        self.push(
            Tensor::scalar(loss),
            Op::FocalLoss {
                logits,
                label,
                alpha_t,
                gamma,
                probs,
            },
            None,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate d`loss`/d`node` into every node that requires gradients.
    /// Calling it twice without [`Tape::zero_grad`] doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Vector-Jacobian product: backpropagate `seed` as the gradient of
    /// `out`, i.e. the gradient of `sum(seed ⊙ out)`.
    pub fn backward_seeded(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward_seeded", self.shape(out), seed.shape()));
        }
        self.backward_from(out, seed.data().to_vec())
    }

    fn backward_from(&mut self, loss: Var, seed: Vec<f64>) -> Result<()> {
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.fault == Some(self.nodes[i].op.kind()) {
                for v in &mut g {
                    *v *= 1.5;
                }
            }
            self.propagate(i, &g, &mut pending);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Adds `f(j)` into the pending gradient of `v`.
        fn add_into(pending: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let s = pending[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            for (j, o) in s.iter_mut().enumerate() {
                *o += f(j);
            }
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if nodes[a.0].requires_grad {
                    let s = pending[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    matmul_nt_into(g, bv.data(), s, m, n, k);
                }
                if nodes[b.0].requires_grad {
                    let s = pending[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    matmul_tn_into(av.data(), g, s, m, k, n);
                }
            }
            Op::Add(a, b) => {
                add_into(pending, nodes, *a, |j| g[j]);
                add_into(pending, nodes, *b, |j| g[j]);
            }
            Op::AddRow(x, bias) => {
                add_into(pending, nodes, *x, |j| g[j]);
                if nodes[bias.0].requires_grad {
                    let d = nodes[bias.0].value.numel();
                    let s = pending[bias.0].get_or_insert_with(|| vec![0.0; d]);
                    for row in g.chunks(d) {
                        for (o, v) in s.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                add_into(pending, nodes, *a, |j| g[j] * bv[j]);
                add_into(pending, nodes, *b, |j| g[j] * av[j]);
            }
            Op::Scale(x, c) => add_into(pending, nodes, *x, |j| g[j] * c),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                add_into(pending, nodes, *x, |j| if xv[j] > 0.0 { g[j] } else { 0.0 });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                add_into(pending, nodes, *x, |j| g[j] * gelu_grad(xv[j]));
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(pending, nodes, *x, |j| dx[j]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                add_into(pending, nodes, *bias, |j| g.chunks(d).map(|r| r[j]).sum());
                add_into(pending, nodes, *gain, |j| {
                    g.chunks(d).zip(xhat.chunks(d)).map(|(r, h)| r[j] * h[j]).sum()
                });
                if nodes[x.0].requires_grad {
                    let s = pending[x.0].get_or_insert_with(|| vec![0.0; g.len()]);
                    let df = d as f64;
                    for (r, ((gr, hr), sr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(s.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sr[j] += inv / df * (df * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis] * inner;
                    if nodes[p.0].requires_grad {
                        let s = pending[p.0].get_or_insert_with(|| vec![0.0; outer * len]);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, v) in s[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if nodes[x.0].requires_grad {
                    let src_shape = nodes[x.0].value.shape();
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let src_chunk = src_shape[*axis] * inner;
                    let len = nodes[i].value.shape()[*axis] * inner;
                    let s = pending[x.0].get_or_insert_with(|| vec![0.0; outer * src_chunk]);
                    for o in 0..outer {
                        let base = o * src_chunk + start * inner;
                        for (d, v) in s[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(pending, nodes, *x, |j| g[j]),
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                // out[j][i] = x[i][j]; x is r×c, out is c×r
                add_into(pending, nodes, *x, |idx| {
                    let (ii, jj) = (idx / c, idx % c);
                    g[jj * r + ii]
                });
            }
            Op::Sum(x) => add_into(pending, nodes, *x, |_| g[0]),
            Op::FocalLoss {
                logits,
                label,
                alpha_t,
                gamma,
                probs,
            } => {
                let p = probs[*label].max(P_FLOOR);
                let dl_dp = focal_dloss_dp(p, *alpha_t, *gamma);
                let y = *label;
                // dp/dz_j = p_y (1[j=y] - p_j), evaluated with the unclamped p_y.
                let py = probs[y];
                add_into(pending, nodes, *logits, |j| {
                    let ind = if j == y { 1.0 } else { 0.0 };
                    g[0] * dl_dp * py * (ind - probs[j])
                });
            }
        }
    }
}

const P_FLOOR: f64 = 1e-12;

fn focal_dloss_dp(p: f64, alpha_t: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    let modulating = q.powf(gamma);
    let modulating_grad = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    -alpha_t * (-modulating_grad * p.ln() + modulating / p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(vals: &[f64]) -> Tensor {
        Tensor::new(&[vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(vector(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(vector(&[0.3, -1.2, 2.0, 0.0]));
        let s = tape.softmax_lastdim(x).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        for g in tape.grad(x).data() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.variable(vector(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_sums() {
        let mut tape = Tape::new();
        let x = tape.variable(vector(&[3.0]));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 5.0).unwrap();
        let c = tape.add(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.variable(vector(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(vector(&[1.5, -2.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::ones(&[2]));
        let bias = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(vector(&[1.0, 3.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let gain4 = tape.constant(Tensor::ones(&[4]));
        let bias4 = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[4], 7.25));
        let y = tape.layer_norm(c, gain4, bias4, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(vector(&[1e300]));
        assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn focal_loss_rejects_bad_label() {
        let mut tape = Tape::new();
        let z = tape.constant(vector(&[0.0, 1.0]));
        assert!(tape.focal_loss(z, 2, 0.25, 2.0).is_err());
    }

    #[test]
    fn append_preserves_gradients() {
        let mut sub = Tape::new();
        let x = sub.variable(vector(&[1.0, 2.0]));
        let y = sub.scale(x, 3.0).unwrap();
        let mut main = Tape::new();
        let w = main.variable(vector(&[0.5, 0.25]));
        let map = main.append(sub);
        let (x, y) = (map(x), map(y));
        let prod = main.mul(w, y).unwrap();
        let loss = main.sum(prod).unwrap();
        main.backward(loss).unwrap();
        assert_eq!(main.grad(x).data(), &[1.5, 0.75]);
        assert_eq!(main.grad(w).data(), &[3.0, 6.0]);
    }

    #[test]
    fn fault_hook_corrupts_named_op() {
        let mut tape = Tape::with_fault(OpKind::Scale);
        let x = tape.variable(vector(&[1.0]));
        let y = tape.scale(x, 2.0).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[3.0]);
    }
}
