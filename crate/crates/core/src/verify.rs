//! Finite-difference verification suite.
//!
//! Every differentiable tape op is checked in isolation at five seeded
//! points, then each layer, the transformer block, a three-frame rollout and
//! the whole fleet forward pass with focal loss.

use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::fleet::{encode_view, fleet_forward, AgentRole, EncoderParams, Execution, FleetModel, ModelConfig, V2XConfig};
use crate::gradcheck::{grad_check_params_vjp, grad_check_vjp, DEFAULT_STEP};
use crate::loss::{focal_loss, FocalLossConfig};
use crate::nn::{ffn, linear, mha, mlp_head, FfnParams, LinearParams, MhaParams, MlpHeadParams};
use crate::params::{ParamId, ParamStore};
use crate::qformer::{qformer_block, rollout, MotionQformerConfig, MotionQformerParams, QueryState};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
pub const POINTS_PER_OP: usize = 5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

/// Ops checked on their own, in report order. `Leaf` has no backward rule.
pub const CHECKED_OPS: [OpKind; 15] = [
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

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Inputs and closure for one random instance of `op`.
fn op_case(op: OpKind, rng: &mut Rng) -> (Vec<Tensor>, OpFn) {
    match op {
        OpKind::MatMul => (
            vec![randn(&[3, 4], rng), randn(&[4, 5], rng)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        OpKind::Add => (
            vec![randn(&[3, 4], rng), randn(&[3, 4], rng)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        OpKind::AddRow => (
            vec![randn(&[3, 4], rng), randn(&[4], rng)],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        OpKind::Mul => (
            vec![randn(&[3, 4], rng), randn(&[3, 4], rng)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        OpKind::Scale => {
            let c = rng.normal();
            (vec![randn(&[3, 4], rng)], Box::new(move |t, v| t.scale(v[0], c)))
        }
        OpKind::Relu => {
            // Keep clear of the kink at 0.
            let x = randn(&[3, 4], rng).map(|v| v + 0.1 * v.signum());
            (vec![x], Box::new(|t, v| t.relu(v[0])))
        }
        OpKind::Gelu => (vec![randn(&[3, 4], rng)], Box::new(|t, v| t.gelu(v[0]))),
        OpKind::Softmax => (vec![randn(&[3, 5], rng)], Box::new(|t, v| t.softmax_lastdim(v[0]))),
        OpKind::LayerNorm => (
            vec![randn(&[2, 8], rng), randn(&[8], rng), randn(&[8], rng)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        OpKind::Concat => (
            vec![randn(&[2, 3], rng), randn(&[4, 3], rng), randn(&[1, 3], rng)],
            Box::new(|t, v| t.concat(v, 0)),
        ),
        OpKind::Slice => (vec![randn(&[5, 4], rng)], Box::new(|t, v| t.slice(v[0], 0, 1, 3))),
        OpKind::Reshape => (
            vec![randn(&[3, 4], rng)],
            Box::new(|t, v| {
                let r = t.reshape(v[0], &[2, 6])?;
                t.flatten(r)
            }),
        ),
        OpKind::Transpose => (vec![randn(&[3, 4], rng)], Box::new(|t, v| t.transpose(v[0]))),
        OpKind::Sum => (vec![randn(&[3, 4], rng)], Box::new(|t, v| t.sum(v[0]))),
        OpKind::FocalLoss => {
            let label = rng.below(2) as usize;
            let alpha_t = if label == 1 { 0.25 } else { 0.75 };
            (
                vec![randn(&[2], rng)],
                Box::new(move |t, v| t.focal_loss(v[0], label, alpha_t, 2.0)),
            )
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

fn check_op(op: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = Rng::derive(seed, 0x0b00 + op as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS_PER_OP {
        let (inputs, f) = op_case(op, &mut rng);
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| probe.variable(x.clone())).collect();
        let out = f(&mut probe, &vars)?;
        let w = randn(probe.shape(out), &mut rng);
        worst = worst.max(grad_check_vjp(fault, &f, &inputs, &w, DEFAULT_STEP)?);
    }
    Ok(worst)
}

/// Replace every weight matrix with wider draws so that gradients are far
/// from zero and the checks have something to bite on.
fn spread(store: &mut ParamStore, rng: &mut Rng, std: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let name = store.name(id);
        if name.ends_with("weight") || name.ends_with("base_query") {
            *store.get_mut(id) = Tensor::randn(&shape, std, rng);
        } else {
            *store.get_mut(id) = Tensor::randn(&shape, 0.1, rng).map(|v| v + if name.ends_with("gain") { 1.0 } else { 0.0 });
        }
    }
}

fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .filter(|id| !store.is_frozen(*id))
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect()
}

fn sample_coords(store: &ParamStore, n: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
    let mut all = all_coords(store);
    rng.shuffle(&mut all);
    all.truncate(n);
    all
}

fn output_weights<F>(store: &ParamStore, f: &F, rng: &mut Rng) -> Result<Tensor>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut t = Tape::new();
    let out = f(&mut t, store)?;
    Ok(randn(t.shape(out), rng))
}

fn check_layer<F>(store: &ParamStore, coords: &[(ParamId, usize)], fault: Option<OpKind>, f: F, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let w = output_weights(store, &f, rng)?;
    grad_check_params_vjp(store, coords, fault, f, &w, DEFAULT_STEP)
}

/// The class the logits currently rank lower, so the focal loss is far
/// from saturation and its gradient is not vanishingly small.
fn harder_label<F>(f: F) -> Result<u8>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut t = Tape::new();
    let z = f(&mut t)?;
    let d = t.value(z).data();
    Ok(u8::from(d[1] < d[0]))
}

const SMALL_D: usize = 8;

fn small_qformer() -> MotionQformerConfig {
    MotionQformerConfig {
        model_dim: SMALL_D,
        num_queries: 2,
        num_blocks: 1,
        num_heads: 2,
        ..Default::default()
    }
}

fn layer_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::derive(seed, 0x1a7e);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64, tol: f64| {
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
        })
    };

    // linear
    {
        let mut store = ParamStore::new();
        let p = LinearParams::init(&mut store, "lin", 5, 3, &mut rng);
        spread(&mut store, &mut rng, 0.5);
        let x = randn(&[4, 5], &mut rng);
        let f = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            linear(t, s, xv, &p)
        };
        let coords = all_coords(&store);
        push("linear", check_layer(&store, &coords, fault, f, &mut rng)?, LAYER_TOLERANCE);
    }

    // mha, with separate value projection so every projection is probed
    for (name, tie) in [("mha", true), ("mha_untied", false)] {
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "attn", SMALL_D, 2, tie, &mut rng)?;
        spread(&mut store, &mut rng, 0.5);
        let q = randn(&[3, SMALL_D], &mut rng);
        let kv = randn(&[5, SMALL_D], &mut rng);
        let f = |t: &mut Tape, s: &ParamStore| {
            let qv = t.constant(q.clone());
            let kvv = t.constant(kv.clone());
            mha(t, s, qv, kvv, &p)
        };
        let coords = all_coords(&store);
        push(name, check_layer(&store, &coords, fault, f, &mut rng)?, LAYER_TOLERANCE);
    }

    // ffn
    {
        let mut store = ParamStore::new();
        let p = FfnParams::init(&mut store, "ffn", SMALL_D, &mut rng);
        spread(&mut store, &mut rng, 0.5);
        let x = randn(&[3, SMALL_D], &mut rng);
        let f = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            ffn(t, s, xv, &p)
        };
        let coords = all_coords(&store);
        push("ffn", check_layer(&store, &coords, fault, f, &mut rng)?, LAYER_TOLERANCE);
    }

    // mlp head
    {
        let mut store = ParamStore::new();
        let p = MlpHeadParams::init(&mut store, "head", 12, 6, &mut rng);
        spread(&mut store, &mut rng, 0.5);
        let x = randn(&[12], &mut rng);
        let f = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            mlp_head(t, s, xv, &p)
        };
        let coords = all_coords(&store);
        push("mlp_head", check_layer(&store, &coords, fault, f, &mut rng)?, LAYER_TOLERANCE);
    }

    // encoder projection of one view
    {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&mut store, "encoder", 4, SMALL_D, false, &mut rng);
        spread(&mut store, &mut rng, 0.5);
        let x = randn(&[3, 4], &mut rng);
        let f = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            encode_view(t, s, xv, &enc)
        };
        let coords = all_coords(&store);
        push("encode_view", check_layer(&store, &coords, fault, f, &mut rng)?, LAYER_TOLERANCE);
    }

    // focal loss composed with the head
    {
        let mut store = ParamStore::new();
        let p = MlpHeadParams::init(&mut store, "head", 12, 6, &mut rng);
        spread(&mut store, &mut rng, 0.5);
        let x = randn(&[12], &mut rng);
        let cfg = FocalLossConfig::default();
        let label = harder_label(|t| {
            let xv = t.constant(x.clone());
            mlp_head(t, &store, xv, &p)
        })?;
        let f = |t: &mut Tape, s: &ParamStore| {
            let xv = t.constant(x.clone());
            let z = mlp_head(t, s, xv, &p)?;
            focal_loss(t, z, label, &cfg)
        };
        let coords = all_coords(&store);
        push("head_focal_loss", check_layer(&store, &coords, fault, f, &mut rng)?, LAYER_TOLERANCE);
    }

    // one transformer block
    {
        let cfg = small_qformer();
        let mut store = ParamStore::new();
        let p = MotionQformerParams::init(&mut store, "qf", &cfg, &mut rng)?;
        spread(&mut store, &mut rng, 0.5);
        let prev = randn(&[cfg.num_queries, SMALL_D], &mut rng);
        let feats = randn(&[6, SMALL_D], &mut rng);
        let f = |t: &mut Tape, s: &ParamStore| {
            let h = t.param(s, p.base_query);
            let prev = QueryState {
                tokens: t.constant(prev.clone()),
                frame_index: 0,
            };
            let fv = t.constant(feats.clone());
            qformer_block(t, s, h, &prev, fv, &p.blocks[0], &cfg)
        };
        let coords = all_coords(&store);
        push("qformer_block", check_layer(&store, &coords, fault, f, &mut rng)?, LAYER_TOLERANCE);
    }
    Ok(out)
}

/// Three-frame rollout at default sizes, loss through the head and focal
/// loss, probed at every entry of the base query.
fn bptt_check(seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = Rng::derive(seed, 0xb977);
    let cfg = MotionQformerConfig::default();
    let d = cfg.model_dim;
    let mut store = ParamStore::new();
    let p = MotionQformerParams::init(&mut store, "qf", &cfg, &mut rng)?;
    let head = MlpHeadParams::init(&mut store, "head", cfg.num_queries * d, 16, &mut rng);
    spread(&mut store, &mut rng, 0.3);
    let frames: Vec<Tensor> = (0..3).map(|_| randn(&[24, d], &mut rng)).collect();
    let loss = FocalLossConfig::default();
    let logits = |t: &mut Tape, s: &ParamStore| {
        let fv: Vec<Var> = frames.iter().map(|x| t.constant(x.clone())).collect();
        let q = rollout(t, s, &fv, &p, &cfg)?;
        let flat = t.flatten(q.tokens)?;
        mlp_head(t, s, flat, &head)
    };
    let label = harder_label(|t| logits(t, &store))?;
    let f = |t: &mut Tape, s: &ParamStore| {
        let z = logits(t, s)?;
        focal_loss(t, z, label, &loss)
    };
    let coords: Vec<_> = (0..store.get(p.base_query).numel()).map(|i| (p.base_query, i)).collect();
    grad_check_params_vjp(&store, &coords, fault, f, &Tensor::scalar(1.0), DEFAULT_STEP)
}

/// Fleet forward for two agents over three frames at default sizes, focal
/// loss on top, probed at ten sampled parameter entries.
fn end_to_end_check(seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = Rng::derive(seed, 0xe2e);
    let v2x = V2XConfig::new([AgentRole::Ego, AgentRole::OtherVehicle])?;
    let cfg = ModelConfig::default();
    let mut model = FleetModel::init(&cfg, &v2x, rng.next_u64())?;
    spread(&mut model.store, &mut rng, 0.3);
    let agents = [AgentRole::Ego, AgentRole::OtherVehicle];
    let scenario = randn(&[3, agents.len(), 6, 4, cfg.feature_dim], &mut rng);
    let loss = FocalLossConfig::default();
    let coords = sample_coords(&model.store, 10, &mut rng);
    let label = harder_label(|t| fleet_forward(t, &model, &scenario, &agents, Execution::Sequential))?;
    let f = |t: &mut Tape, s: &ParamStore| {
        let m = FleetModel {
            store: s.clone(),
            ..model.clone()
        };
        let z = fleet_forward(t, &m, &scenario, &agents, Execution::Sequential)?;
        focal_loss(t, z, label, &loss)
    };
    grad_check_params_vjp(&model.store, &coords, fault, f, &Tensor::scalar(1.0), DEFAULT_STEP)
}

/// Run the whole suite. `fault` corrupts one op's backward rule.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for op in CHECKED_OPS {
        results.push(CheckResult {
            name: op.name().to_string(),
            max_rel_err: check_op(op, seed, fault)?,
            tolerance: OP_TOLERANCE,
        });
    }
    results.extend(layer_checks(seed, fault)?);
    results.push(CheckResult {
        name: "bptt_rollout_t3".into(),
        max_rel_err: bptt_check(seed, fault)?,
        tolerance: END_TO_END_TOLERANCE,
    });
    results.push(CheckResult {
        name: "fleet_forward_focal_loss".into(),
        max_rel_err: end_to_end_check(seed, fault)?,
        tolerance: END_TO_END_TOLERANCE,
    });
    Ok(SuiteReport { results })
}
