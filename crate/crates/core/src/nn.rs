//! Parameterized layers: linear, multi-head attention, feed-forward, and
//! the classification head.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        LinearParams {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }
}

/// `x · W + b` for `x` of shape `n × in`.
pub fn linear(tape: &mut Tape, store: &ParamStore, x: Var, p: &LinearParams) -> Result<Var> {
    let w = tape.param(store, p.weight);
    let b = tape.param(store, p.bias);
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaParams {
    pub q_proj: LinearParams,
    pub k_proj: LinearParams,
    /// Equal to `k_proj` when keys and values share one projection.
    pub v_proj: LinearParams,
    pub out_proj: LinearParams,
    pub heads: usize,
}

impl MhaParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        heads: usize,
        tie_kv: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model dim {model_dim}"
            )));
        }
        let q_proj = LinearParams::init(store, &format!("{name}.q_proj"), model_dim, model_dim, rng);
        let k_proj = LinearParams::init(store, &format!("{name}.k_proj"), model_dim, model_dim, rng);
        let v_proj = if tie_kv {
            k_proj
        } else {
            LinearParams::init(store, &format!("{name}.v_proj"), model_dim, model_dim, rng)
        };
        let out_proj = LinearParams::init(store, &format!("{name}.out_proj"), model_dim, model_dim, rng);
        Ok(MhaParams {
            q_proj,
            k_proj,
            v_proj,
            out_proj,
            heads,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.q_proj.in_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    pub fn tied(&self) -> bool {
        self.k_proj == self.v_proj
    }
}

/// Attention output plus the per-head weight matrices (`n_q × n_kv`, rows
/// summing to one).
#[derive(Debug, Clone)]
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn mha(tape: &mut Tape, store: &ParamStore, q_in: Var, kv_in: Var, p: &MhaParams) -> Result<Var> {
    Ok(mha_with_weights(tape, store, q_in, kv_in, p)?.output)
}

pub fn mha_with_weights(
    tape: &mut Tape,
    store: &ParamStore,
    q_in: Var,
    kv_in: Var,
    p: &MhaParams,
) -> Result<Attention> {
    let d = p.model_dim();
    let (qs, ks) = (tape.shape(q_in), tape.shape(kv_in));
    if qs.len() != 2 || ks.len() != 2 || qs[1] != d || ks[1] != d {
        return Err(Error::shape("mha", qs, ks));
    }
    let dk = p.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let q = linear(tape, store, q_in, &p.q_proj)?;
    let k = linear(tape, store, kv_in, &p.k_proj)?;
    let v = if p.tied() { k } else { linear(tape, store, kv_in, &p.v_proj)? };

    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice(q, 1, h * dk, dk)?;
        let kh = tape.slice(k, 1, h * dk, dk)?;
        let vh = tape.slice(v, 1, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let w = tape.softmax_lastdim(scores)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = tape.concat(&heads, 1)?;
    let output = linear(tape, store, merged, &p.out_proj)?;
    Ok(Attention { output, weights })
}

fn linear_loops(store: &ParamStore, x: &Tensor, p: &LinearParams) -> Tensor {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let w = store.get(p.weight);
    let b = store.get(p.bias).data();
    let mut out = Tensor::zeros(&[n, p.out_dim]);
    for i in 0..n {
        for j in 0..p.out_dim {
            let mut acc = b[j];
            for k in 0..din {
                acc += x.get2(i, k) * w.get2(k, j);
            }
            out.data_mut()[i * p.out_dim + j] = acc;
        }
    }
    out
}

/// Reference multi-head attention written with explicit scalar loops over
/// heads, queries and keys. Used to check [`mha`].
pub fn mha_oracle(store: &ParamStore, q_in: &Tensor, kv_in: &Tensor, p: &MhaParams) -> Result<Tensor> {
    let d = p.model_dim();
    let (nq, dq) = q_in.dims2("mha_oracle")?;
    let (nkv, dkv) = kv_in.dims2("mha_oracle")?;
    if dq != d || dkv != d {
        return Err(Error::shape("mha_oracle", q_in.shape(), kv_in.shape()));
    }
    let q = linear_loops(store, q_in, &p.q_proj);
    let k = linear_loops(store, kv_in, &p.k_proj);
    let v = linear_loops(store, kv_in, &p.v_proj);
    let dk = p.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut merged = Tensor::zeros(&[nq, d]);
    for h in 0..p.heads {
        let off = h * dk;
        for i in 0..nq {
            let mut scores = vec![0.0; nkv];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dk {
                    dot += q.get2(i, off + c) * k.get2(j, off + c);
                }
                *s = dot * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in &mut scores {
                *s = (*s - max).exp();
                total += *s;
            }
            for c in 0..dk {
                let mut acc = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    acc += s / total * v.get2(j, off + c);
                }
                merged.data_mut()[i * d + off + c] = acc;
            }
        }
    }
    Ok(linear_loops(store, &merged, &p.out_proj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FfnParams {
    pub fn init(store: &mut ParamStore, name: &str, model_dim: usize, rng: &mut Rng) -> Self {
        FfnParams {
            lin1: LinearParams::init(store, &format!("{name}.lin1"), model_dim, 4 * model_dim, rng),
            lin2: LinearParams::init(store, &format!("{name}.lin2"), 4 * model_dim, model_dim, rng),
        }
    }
}

pub fn ffn(tape: &mut Tape, store: &ParamStore, x: Var, p: &FfnParams) -> Result<Var> {
    let h = linear(tape, store, x, &p.lin1)?;
    let h = tape.gelu(h)?;
    linear(tape, store, h, &p.lin2)
}

pub const HEAD_HIDDEN: usize = 256;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpHeadParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl MlpHeadParams {
    pub fn init(store: &mut ParamStore, name: &str, flat_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        MlpHeadParams {
            lin1: LinearParams::init(store, &format!("{name}.lin1"), flat_in, hidden, rng),
            lin2: LinearParams::init(store, &format!("{name}.lin2"), hidden, NUM_CLASSES, rng),
        }
    }

    pub fn flat_in(&self) -> usize {
        self.lin1.in_dim
    }
}

/// Two class logits (0 = no accident, 1 = accident) from a flat feature
/// vector.
pub fn mlp_head(tape: &mut Tape, store: &ParamStore, x_flat: Var, p: &MlpHeadParams) -> Result<Var> {
    let n = tape.value(x_flat).numel();
    if tape.shape(x_flat).len() != 1 || n != p.flat_in() {
        return Err(Error::Config(format!(
            "head expects a flat input of {} values, got shape {:?}",
            p.flat_in(),
            tape.shape(x_flat)
        )));
    }
    let row = tape.reshape(x_flat, &[1, n])?;
    let h = linear(tape, store, row, &p.lin1)?;
    let h = tape.relu(h)?;
    let logits = linear(tape, store, h, &p.lin2)?;
    tape.reshape(logits, &[NUM_CLASSES])
}
