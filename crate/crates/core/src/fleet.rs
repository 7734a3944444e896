//! Per-agent perception and the multi-agent query gather.
//!
//! Every agent owns six cameras. A frame's six views are encoded patch by
//! patch, stitched in canonical view order, and fed to the motion query
//! transformer; the final queries of the participating agents are stacked
//! in role order, flattened, and classified by the MLP head. All agents
//! share one set of encoder and transformer weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{linear, mlp_head, LinearParams, MlpHeadParams, HEAD_HIDDEN};
use crate::params::ParamStore;
use crate::qformer::{rollout, MotionQformerConfig, MotionQformerParams, QueryState};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NUM_VIEWS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewId {
    Front,
    FrontLeft,
    FrontRight,
    Back,
    BackLeft,
    BackRight,
}

impl ViewId {
    pub const ALL: [ViewId; NUM_VIEWS] = [
        ViewId::Front,
        ViewId::FrontLeft,
        ViewId::FrontRight,
        ViewId::Back,
        ViewId::BackLeft,
        ViewId::BackRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Agent roles. The ordinal is the gather order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentRole {
    Ego = 0,
    OtherVehicle = 1,
    BehindEgo = 2,
    BehindOther = 3,
    Infrastructure = 4,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Ego,
        AgentRole::OtherVehicle,
        AgentRole::BehindEgo,
        AgentRole::BehindOther,
        AgentRole::Infrastructure,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(v: u8) -> Option<AgentRole> {
        AgentRole::ALL.get(v as usize).copied()
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Which agents contribute queries to the classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "V2xRepr", into = "V2xRepr")]
pub struct V2XConfig {
    included: BTreeSet<AgentRole>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct V2xRepr {
    included: Vec<AgentRole>,
}

impl TryFrom<V2xRepr> for V2XConfig {
    type Error = Error;
    fn try_from(r: V2xRepr) -> Result<Self> {
        V2XConfig::new(r.included)
    }
}

impl From<V2XConfig> for V2xRepr {
    fn from(c: V2XConfig) -> Self {
        V2xRepr {
            included: c.included.into_iter().collect(),
        }
    }
}

impl Default for V2XConfig {
    fn default() -> Self {
        V2XConfig::ego_only()
    }
}

impl V2XConfig {
    pub fn new(roles: impl IntoIterator<Item = AgentRole>) -> Result<Self> {
        let included: BTreeSet<_> = roles.into_iter().collect();
        if !included.contains(&AgentRole::Ego) {
            return Err(Error::Config("V2X configuration must include Ego".into()));
        }
        Ok(V2XConfig { included })
    }

    pub fn ego_only() -> Self {
        V2XConfig {
            included: [AgentRole::Ego].into(),
        }
    }

    /// The four configurations compared in the ablation table, in row order:
    /// ego; ego + other; ego + other + infrastructure; ego + other + both
    /// vehicles behind.
    pub fn table_rows() -> Vec<V2XConfig> {
        use AgentRole::*;
        vec![
            V2XConfig::ego_only(),
            V2XConfig::new([Ego, OtherVehicle]).unwrap(),
            V2XConfig::new([Ego, OtherVehicle, Infrastructure]).unwrap(),
            V2XConfig::new([Ego, OtherVehicle, BehindEgo, BehindOther]).unwrap(),
        ]
    }

    /// Included roles in gather order.
    pub fn roles(&self) -> impl Iterator<Item = AgentRole> + '_ {
        self.included.iter().copied()
    }

    pub fn contains(&self, role: AgentRole) -> bool {
        self.included.contains(&role)
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn head_input_dim(&self, qf: &MotionQformerConfig) -> usize {
        self.len() * qf.num_queries * qf.model_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub qformer: MotionQformerConfig,
    /// Width of a raw feature patch.
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub freeze_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            qformer: MotionQformerConfig::default(),
            feature_dim: 16,
            head_hidden: HEAD_HIDDEN,
            freeze_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.qformer.validate()?;
        if self.feature_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("feature_dim and head_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub proj: LinearParams,
    pub frozen: bool,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, name: &str, feature_dim: usize, model_dim: usize, frozen: bool, rng: &mut Rng) -> Self {
        let proj = LinearParams::init(store, &format!("{name}.proj"), feature_dim, model_dim, rng);
        store.set_frozen(proj.weight, frozen);
        store.set_frozen(proj.bias, frozen);
        EncoderParams { proj, frozen }
    }
}

/// Raw patches of one camera at one timestep.
#[derive(Debug, Clone)]
pub struct ViewFrame {
    pub tokens: Tensor,
    pub view: ViewId,
}

pub fn encode_view(tape: &mut Tape, store: &ParamStore, view: Var, enc: &EncoderParams) -> Result<Var> {
    let s = tape.shape(view);
    if s.len() != 2 || s[1] != enc.proj.in_dim {
        return Err(Error::shape("encode_view", s, &[enc.proj.in_dim, enc.proj.out_dim]));
    }
    linear(tape, store, view, &enc.proj)
}

/// Stack six encoded views (canonical order) into one `(6·P) × D` matrix.
pub fn stitch_views(tape: &mut Tape, views: &[Var]) -> Result<Var> {
    if views.len() != NUM_VIEWS {
        return Err(Error::invalid(
            "stitch_views",
            format!("expected {NUM_VIEWS} views, got {}", views.len()),
        ));
    }
    let shape = tape.shape(views[0]).to_vec();
    if let Some(bad) = views.iter().find(|v| tape.shape(**v) != shape.as_slice()) {
        return Err(Error::shape("stitch_views", &shape, tape.shape(*bad)));
    }
    tape.concat(views, 0)
}

/// All parameters for one V2X configuration.
#[derive(Debug, Clone)]
pub struct FleetModel {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub v2x: V2XConfig,
    pub encoder: EncoderParams,
    pub qformer: MotionQformerParams,
    pub head: MlpHeadParams,
}

/// Stream tag for parameter initialization.
const INIT_STREAM: u64 = 0x1217;

impl FleetModel {
    pub fn init(config: &ModelConfig, v2x: &V2XConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let qf = &config.qformer;
        let encoder = EncoderParams::init(
            &mut store,
            "encoder",
            config.feature_dim,
            qf.model_dim,
            config.freeze_encoder,
            &mut rng,
        );
        let qformer = MotionQformerParams::init(&mut store, "qformer", qf, &mut rng)?;
        let head = MlpHeadParams::init(
            &mut store,
            "head",
            v2x.head_input_dim(qf),
            config.head_hidden,
            &mut rng,
        );
        Ok(FleetModel {
            store,
            config: config.clone(),
            v2x: v2x.clone(),
            encoder,
            qformer,
            head,
        })
    }

    /// Fails when the head was built for a different agent set.
    pub fn check_v2x(&self, v2x: &V2XConfig) -> Result<()> {
        let want = v2x.head_input_dim(&self.config.qformer);
        if *v2x != self.v2x || want != self.head.flat_in() {
            return Err(Error::Compatibility(format!(
                "model head takes {} inputs for agents {:?}, configuration {:?} needs {}",
                self.head.flat_in(),
                self.v2x.roles().collect::<Vec<_>>(),
                v2x.roles().collect::<Vec<_>>(),
                want
            )));
        }
        Ok(())
    }
}

/// `T × 6 × P × F` slice of a `T × N_A × 6 × P × F` scenario tensor.
pub fn agent_sequence(scenario: &Tensor, agent_index: usize) -> Result<Tensor> {
    let s = scenario.shape();
    if s.len() != 5 || s[2] != NUM_VIEWS || agent_index >= s[1] {
        return Err(Error::invalid(
            "agent_sequence",
            format!("agent {agent_index} of scenario shape {s:?}"),
        ));
    }
    let (t, na, p, f) = (s[0], s[1], s[3], s[4]);
    let block = NUM_VIEWS * p * f;
    let mut data = Vec::with_capacity(t * block);
    for ti in 0..t {
        let base = (ti * na + agent_index) * block;
        data.extend_from_slice(&scenario.data()[base..base + block]);
    }
    Tensor::new(&[t, NUM_VIEWS, p, f], data)
}

/// Encode, stitch and roll out one agent's `T × 6 × P × F` recording.
pub fn agent_forward(tape: &mut Tape, model: &FleetModel, sequence: &Tensor) -> Result<QueryState> {
    let s = sequence.shape();
    if s.len() != 4 || s[1] != NUM_VIEWS {
        return Err(Error::invalid("agent_forward", format!("expected T×6×P×F, got {s:?}")));
    }
    let (t, p, f) = (s[0], s[2], s[3]);
    let store = &model.store;
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let mut views = Vec::with_capacity(NUM_VIEWS);
        for v in 0..NUM_VIEWS {
            let off = (ti * NUM_VIEWS + v) * p * f;
            let raw = Tensor::from_parts(vec![p, f], sequence.data()[off..off + p * f].to_vec());
            let raw = tape.constant(raw);
            views.push(encode_view(tape, store, raw, &model.encoder)?);
        }
        frames.push(stitch_views(tape, &views)?);
    }
    rollout(tape, store, &frames, &model.qformer, &model.config.qformer)
}

/// Stack the final queries of every included role in role order.
pub fn gather_queries(tape: &mut Tape, per_agent: &BTreeMap<AgentRole, Var>, cfg: &V2XConfig) -> Result<Var> {
    let mut parts = Vec::with_capacity(cfg.len());
    for role in cfg.roles() {
        let q = per_agent
            .get(&role)
            .ok_or_else(|| Error::Config(format!("no query for included agent {role}")))?;
        parts.push(*q);
    }
    tape.concat(&parts, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

/// Logits for one scenario. `agents[i]` names the role recorded at index
/// `i` of the scenario's agent axis. Roles outside the model's V2X
/// configuration are never evaluated.
pub fn fleet_forward(
    tape: &mut Tape,
    model: &FleetModel,
    scenario: &Tensor,
    agents: &[AgentRole],
    exec: Execution,
) -> Result<Var> {
    let mut jobs = Vec::with_capacity(model.v2x.len());
    for role in model.v2x.roles() {
        let idx = agents.iter().position(|&a| a == role).ok_or_else(|| {
            Error::Compatibility(format!("scenario has no recording for agent {role}"))
        })?;
        jobs.push((role, idx));
    }
    let run = |&(role, idx): &(AgentRole, usize)| -> Result<(AgentRole, Tape, Var)> {
        let seq = agent_sequence(scenario, idx)?;
        let mut sub = tape.sibling();
        let q = agent_forward(&mut sub, model, &seq)?;
        Ok((role, sub, q.tokens))
    };
    let results: Vec<Result<(AgentRole, Tape, Var)>> = match exec {
        Execution::Sequential => jobs.iter().map(run).collect(),
        Execution::Parallel => jobs.par_iter().map(run).collect(),
    };
    let mut per_agent = BTreeMap::new();
    for r in results {
        let (role, sub, q) = r?;
        let map = tape.append(sub);
        per_agent.insert(role, map(q));
    }
    let gathered = gather_queries(tape, &per_agent, &model.v2x)?;
    let flat = tape.flatten(gathered)?;
    mlp_head(tape, &model.store, flat, &model.head)
}

/// Logits of the plain single-vehicle path: one agent, no gather.
pub fn single_agent_logits(tape: &mut Tape, model: &FleetModel, sequence: &Tensor) -> Result<Var> {
    let q = agent_forward(tape, model, sequence)?;
    let flat = tape.flatten(q.tokens)?;
    mlp_head(tape, &model.store, flat, &model.head)
}
