//! The motion query transformer.
//!
//! Each block runs temporal attention (queries from the running hidden
//! state, keys/values from the previous frame's output query), cross
//! attention over the stitched multi-view features of the current frame,
//! and a feed-forward layer, each followed by a residual add and layer norm.
//! A rollout feeds the output query of frame `t` into frame `t + 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ffn, mha, FfnParams, MhaParams};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Source of temporal-attention keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKvMode {
    /// Previous frame's query only.
    PrevOnly,
    /// Current hidden state stacked on top of the previous frame's query.
    #[default]
    ConcatCurrentPrev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionQformerConfig {
    pub model_dim: usize,
    pub num_queries: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub temporal_kv_mode: TemporalKvMode,
    pub tie_kv: bool,
}

impl Default for MotionQformerConfig {
    fn default() -> Self {
        MotionQformerConfig {
            model_dim: 32,
            num_queries: 8,
            num_blocks: 2,
            num_heads: 4,
            temporal_kv_mode: TemporalKvMode::ConcatCurrentPrev,
            tie_kv: true,
        }
    }
}

impl MotionQformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} must divide model_dim {}",
                self.num_heads, self.model_dim
            )));
        }
        if self.num_blocks == 0 || self.num_queries == 0 {
            return Err(Error::Config("num_blocks and num_queries must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        NormParams {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub temporal: MhaParams,
    pub cross: MhaParams,
    pub ffn: FfnParams,
    pub norm_temporal: NormParams,
    pub norm_cross: NormParams,
    pub norm_ffn: NormParams,
}

#[derive(Debug, Clone)]
pub struct MotionQformerParams {
    /// Learned initial query (frame 0 state and every frame's block input).
    pub base_query: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl MotionQformerParams {
    pub fn init(store: &mut ParamStore, name: &str, cfg: &MotionQformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let base_query = store.add_normal(format!("{name}.base_query"), &[cfg.num_queries, d], rng);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let prefix = format!("{name}.blocks.{i}");
            blocks.push(BlockParams {
                temporal: MhaParams::init(store, &format!("{prefix}.temporal"), d, cfg.num_heads, cfg.tie_kv, rng)?,
                cross: MhaParams::init(store, &format!("{prefix}.cross"), d, cfg.num_heads, cfg.tie_kv, rng)?,
                ffn: FfnParams::init(store, &format!("{prefix}.ffn"), d, rng),
                norm_temporal: NormParams::init(store, &format!("{prefix}.norm_temporal"), d),
                norm_cross: NormParams::init(store, &format!("{prefix}.norm_cross"), d),
                norm_ffn: NormParams::init(store, &format!("{prefix}.norm_ffn"), d),
            });
        }
        Ok(MotionQformerParams { base_query, blocks })
    }
}

/// Recurrent query tokens after `frame_index` frames.
#[derive(Debug, Clone, Copy)]
pub struct QueryState {
    pub tokens: Var,
    pub frame_index: usize,
}

pub fn init_query(tape: &mut Tape, store: &ParamStore, params: &MotionQformerParams) -> QueryState {
    QueryState {
        tokens: tape.param(store, params.base_query),
        frame_index: 0,
    }
}

pub fn temporal_attention(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    prev: &QueryState,
    p: &MhaParams,
    mode: TemporalKvMode,
) -> Result<Var> {
    if tape.shape(h) != tape.shape(prev.tokens) {
        return Err(Error::shape("temporal_attention", tape.shape(h), tape.shape(prev.tokens)));
    }
    let kv = match mode {
        TemporalKvMode::PrevOnly => prev.tokens,
        TemporalKvMode::ConcatCurrentPrev => tape.concat(&[h, prev.tokens], 0)?,
    };
    mha(tape, store, h, kv, p)
}

pub fn qformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    prev: &QueryState,
    features: Var,
    block: &BlockParams,
    cfg: &MotionQformerConfig,
) -> Result<Var> {
    let fs = tape.shape(features);
    if fs.len() != 2 || fs[1] != cfg.model_dim {
        return Err(Error::shape("qformer_block", tape.shape(h), fs));
    }
    let t = temporal_attention(tape, store, h, prev, &block.temporal, cfg.temporal_kv_mode)?;
    let h1 = tape.add(h, t)?;
    let h1 = block.norm_temporal.apply(tape, store, h1)?;
    let c = mha(tape, store, h1, features, &block.cross)?;
    let h2 = tape.add(h1, c)?;
    let h2 = block.norm_cross.apply(tape, store, h2)?;
    let f = ffn(tape, store, h2, &block.ffn)?;
    let h3 = tape.add(h2, f)?;
    block.norm_ffn.apply(tape, store, h3)
}

/// One frame of the recurrence: every block sees the same `prev`.
pub fn step(
    tape: &mut Tape,
    store: &ParamStore,
    prev: &QueryState,
    features: Var,
    params: &MotionQformerParams,
    cfg: &MotionQformerConfig,
) -> Result<QueryState> {
    let mut h = tape.param(store, params.base_query);
    for block in &params.blocks {
        h = qformer_block(tape, store, h, prev, features, block, cfg)?;
    }
    Ok(QueryState {
        tokens: h,
        frame_index: prev.frame_index + 1,
    })
}

/// Run the recurrence over `frames` (one stitched feature matrix per frame)
/// and return the final query.
pub fn rollout(
    tape: &mut Tape,
    store: &ParamStore,
    frames: &[Var],
    params: &MotionQformerParams,
    cfg: &MotionQformerConfig,
) -> Result<QueryState> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("rollout", "no frames"))?;
    let shape = tape.shape(*first).to_vec();
    if let Some(bad) = frames.iter().find(|f| tape.shape(**f) != shape.as_slice()) {
        return Err(Error::shape("rollout", &shape, tape.shape(*bad)));
    }
    let mut q = init_query(tape, store, params);
    for &f in frames {
        q = step(tape, store, &q, f, params, cfg)?;
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mha_oracle, mha_with_weights};

    fn fixture(mode: TemporalKvMode, blocks: usize) -> (ParamStore, MotionQformerParams, MotionQformerConfig) {
        let cfg = MotionQformerConfig {
            temporal_kv_mode: mode,
            num_blocks: blocks,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(21);
        let params = MotionQformerParams::init(&mut store, "qf", &cfg, &mut rng).unwrap();
        // Spread weights out so attention patterns are non-trivial.
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("weight") || store.name(id).ends_with("base_query") {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::randn(&shape, 0.25, &mut rng);
            }
        }
        (store, params, cfg)
    }

    fn random_frames(tape: &mut Tape, n: usize, seed: u64) -> Vec<Var> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| tape.constant(Tensor::randn(&[24, 32], 1.0, &mut rng)))
            .collect()
    }

    #[test]
    fn init_query_shape_and_repeatability() {
        let (store, params, _) = fixture(TemporalKvMode::PrevOnly, 1);
        let mut tape = Tape::new();
        let a = init_query(&mut tape, &store, &params);
        let b = init_query(&mut Tape::new(), &store, &params);
        assert_eq!(tape.shape(a.tokens), &[8, 32]);
        assert_eq!(a.frame_index, 0);
        assert_eq!(b.frame_index, 0);
        assert_eq!(tape.value(a.tokens), store.get(params.base_query));
    }

    #[test]
    fn prev_only_with_prev_equal_input_is_self_attention() {
        let (store, params, _) = fixture(TemporalKvMode::PrevOnly, 1);
        let mut tape = Tape::new();
        let q0 = init_query(&mut tape, &store, &params);
        let block = &params.blocks[0];
        let t = temporal_attention(&mut tape, &store, q0.tokens, &q0, &block.temporal, TemporalKvMode::PrevOnly)
            .unwrap();
        let s = mha(&mut tape, &store, q0.tokens, q0.tokens, &block.temporal).unwrap();
        assert!(tape.value(t).bit_eq(tape.value(s)));
    }

    #[test]
    fn duplicated_keys_match_self_attention() {
        let (store, params, _) = fixture(TemporalKvMode::ConcatCurrentPrev, 1);
        let mut tape = Tape::new();
        let q0 = init_query(&mut tape, &store, &params);
        let block = &params.blocks[0];
        let t = temporal_attention(
            &mut tape,
            &store,
            q0.tokens,
            &q0,
            &block.temporal,
            TemporalKvMode::ConcatCurrentPrev,
        )
        .unwrap();
        let base = store.get(params.base_query);
        let oracle = mha_oracle(&store, base, base, &block.temporal).unwrap();
        assert!(tape.value(t).max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn temporal_attention_matches_oracle_composition() {
        let (store, params, _) = fixture(TemporalKvMode::ConcatCurrentPrev, 1);
        let mut rng = Rng::new(3);
        let h = Tensor::randn(&[8, 32], 1.0, &mut rng);
        let prev = Tensor::randn(&[8, 32], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let pv = tape.constant(prev.clone());
        let state = QueryState { tokens: pv, frame_index: 1 };
        let block = &params.blocks[0];
        for mode in [TemporalKvMode::PrevOnly, TemporalKvMode::ConcatCurrentPrev] {
            let out = temporal_attention(&mut tape, &store, hv, &state, &block.temporal, mode).unwrap();
            let kv = match mode {
                TemporalKvMode::PrevOnly => prev.clone(),
                TemporalKvMode::ConcatCurrentPrev => Tensor::concat(&[&h, &prev], 0).unwrap(),
            };
            let oracle = mha_oracle(&store, &h, &kv, &block.temporal).unwrap();
            assert!(tape.value(out).max_abs_diff(&oracle) < 1e-10);
        }
    }

    #[test]
    fn block_shape_is_independent_of_feature_count() {
        let (store, params, cfg) = fixture(TemporalKvMode::ConcatCurrentPrev, 1);
        let mut rng = Rng::new(5);
        for m in [1, 6, 24, 40] {
            let mut tape = Tape::new();
            let q0 = init_query(&mut tape, &store, &params);
            let f = tape.constant(Tensor::randn(&[m, 32], 1.0, &mut rng));
            let out = qformer_block(&mut tape, &store, q0.tokens, &q0, f, &params.blocks[0], &cfg).unwrap();
            assert_eq!(tape.shape(out), &[8, 32]);
        }
    }

    #[test]
    fn zero_features_give_uniform_cross_attention() {
        let (store, params, cfg) = fixture(TemporalKvMode::ConcatCurrentPrev, 1);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::ones(&[8, 32]));
        let f = tape.constant(Tensor::zeros(&[24, 32]));
        let att = mha_with_weights(&mut tape, &store, q, f, &params.blocks[0].cross).unwrap();
        for w in att.weights {
            assert!(tape.value(w).data().iter().all(|&x| (x - 1.0 / 24.0).abs() < 1e-15));
        }
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[24, 32]));
        let q0 = init_query(&mut tape, &store, &params);
        let out = step(&mut tape, &store, &q0, f, &params, &cfg).unwrap();
        assert!(tape.value(out.tokens).check_finite("step").is_ok());
    }

    #[test]
    fn single_block_step_is_one_block() {
        let (store, params, cfg) = fixture(TemporalKvMode::ConcatCurrentPrev, 1);
        let mut tape = Tape::new();
        let frames = random_frames(&mut tape, 1, 9);
        let q0 = init_query(&mut tape, &store, &params);
        let s = step(&mut tape, &store, &q0, frames[0], &params, &cfg).unwrap();
        let b = qformer_block(&mut tape, &store, q0.tokens, &q0, frames[0], &params.blocks[0], &cfg).unwrap();
        assert_eq!(s.frame_index, 1);
        assert!(tape.value(s.tokens).bit_eq(tape.value(b)));
    }

    #[test]
    fn step_is_sensitive_to_features() {
        let (store, params, cfg) = fixture(TemporalKvMode::ConcatCurrentPrev, 2);
        let mut tape = Tape::new();
        let frames = random_frames(&mut tape, 2, 10);
        let q0 = init_query(&mut tape, &store, &params);
        let a = step(&mut tape, &store, &q0, frames[0], &params, &cfg).unwrap();
        let b = step(&mut tape, &store, &q0, frames[1], &params, &cfg).unwrap();
        assert!(tape.value(a.tokens).max_abs_diff(tape.value(b.tokens)) > 0.0);
    }

    #[test]
    fn single_frame_rollout_is_one_step() {
        let (store, params, cfg) = fixture(TemporalKvMode::ConcatCurrentPrev, 2);
        let mut tape = Tape::new();
        let frames = random_frames(&mut tape, 1, 11);
        let r = rollout(&mut tape, &store, &frames, &params, &cfg).unwrap();
        let q0 = init_query(&mut tape, &store, &params);
        let s = step(&mut tape, &store, &q0, frames[0], &params, &cfg).unwrap();
        assert_eq!(r.frame_index, 1);
        assert!(tape.value(r.tokens).bit_eq(tape.value(s.tokens)));
    }

    #[test]
    fn rollout_carries_first_frame() {
        let (store, params, cfg) = fixture(TemporalKvMode::ConcatCurrentPrev, 2);
        let mut tape = Tape::new();
        let mut frames = random_frames(&mut tape, 5, 12);
        let base = rollout(&mut tape, &store, &frames, &params, &cfg).unwrap();
        let mut rng = Rng::new(99);
        let mut bump = Tensor::randn(&[24, 32], 1.0, &mut rng);
        let norm = bump.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        bump = bump.scale(1.0 / norm);
        let perturbed = tape.value(frames[0]).add(&bump).unwrap();
        frames[0] = tape.constant(perturbed);
        let moved = rollout(&mut tape, &store, &frames, &params, &cfg).unwrap();
        assert_eq!(moved.frame_index, 5);
        assert!(tape.value(base.tokens).max_abs_diff(tape.value(moved.tokens)) > 0.0);
    }

    #[test]
    fn rollout_rejects_empty_and_ragged() {
        let (store, params, cfg) = fixture(TemporalKvMode::ConcatCurrentPrev, 1);
        let mut tape = Tape::new();
        assert!(rollout(&mut tape, &store, &[], &params, &cfg).is_err());
        let a = tape.constant(Tensor::zeros(&[24, 32]));
        let b = tape.constant(Tensor::zeros(&[12, 32]));
        assert!(rollout(&mut tape, &store, &[a, b], &params, &cfg).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = MotionQformerConfig {
            num_heads: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MotionQformerConfig {
            num_blocks: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
