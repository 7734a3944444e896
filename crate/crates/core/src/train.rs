//! Training loop, evaluation and the V2X ablation runner.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{Dataset, Scenario, Split};
use crate::error::{Error, Result};
use crate::fleet::{fleet_forward, AgentRole, Execution, FleetModel, ModelConfig, V2XConfig};
use crate::loss::{focal_loss, FocalLossConfig};
use crate::optim::{adam_step, lr_at, AdamState};
use crate::params::Grads;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub seed: u64,
    pub loss: FocalLossConfig,
    /// Agents the model listens to. Serialized in its own run-config section.
    #[serde(skip)]
    pub v2x: V2XConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 8,
            warmup_epochs: 3,
            peak_lr: 1e-4,
            floor_lr: 1e-5,
            seed: 0,
            loss: FocalLossConfig::default(),
            v2x: V2XConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs ({}) must be below train.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.floor_lr >= 0.0 && self.floor_lr < self.peak_lr && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= train.floor_lr < train.peak_lr, got {} and {}",
                self.floor_lr, self.peak_lr
            )));
        }
        self.loss.validate()
    }

    pub fn lr(&self, step: usize, steps_per_epoch: usize) -> f64 {
        lr_at(step, steps_per_epoch, self.epochs, self.warmup_epochs, self.peak_lr, self.floor_lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// One JSON object per line.
pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: FleetModel,
    pub metrics: Vec<EpochMetrics>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub predicted: u8,
    pub logits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::invalid("evaluate", "no scenarios to evaluate"));
        }
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for p in &predictions {
            match (p.label, p.predicted) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (0, 1) => fp += 1,
                _ => fn_ += 1,
            }
        }
        let accuracy = (tp + tn) as f64 / (tp + tn + fp + fn_) as f64;
        Ok(EvalReport {
            tp,
            tn,
            fp,
            fn_,
            accuracy,
            predictions,
        })
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Class with the larger logit; ties go to class 0.
pub fn argmax2(logits: [f64; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}

fn check_agents(model: &FleetModel, scenarios: &[&Scenario]) -> Result<()> {
    for s in scenarios {
        if let Some(role) = model.v2x.roles().find(|r| !s.agents.contains(r)) {
            return Err(Error::Compatibility(format!(
                "scenario {} has no recording for agent {role}",
                s.id
            )));
        }
        let f = *s.tensor.shape().last().unwrap_or(&0);
        if f != model.config.feature_dim {
            return Err(Error::Compatibility(format!(
                "scenario {} has feature width {f}, model expects {}",
                s.id, model.config.feature_dim
            )));
        }
    }
    Ok(())
}

pub fn logits(model: &FleetModel, s: &Scenario) -> Result<[f64; 2]> {
    let mut tape = Tape::new();
    let z = fleet_forward(&mut tape, model, &s.tensor, &s.agents, Execution::Sequential)?;
    let d = tape.value(z).data();
    Ok([d[0], d[1]])
}

fn loss_and_grads(model: &FleetModel, s: &Scenario, loss: &FocalLossConfig) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let z = fleet_forward(&mut tape, model, &s.tensor, &s.agents, Execution::Sequential)?;
    let l = focal_loss(&mut tape, z, s.label, loss)?;
    tape.backward(l)?;
    let mut grads = Grads::new(&model.store);
    tape.collect_grads(&mut grads);
    Ok((tape.value(l).item(), grads))
}

fn evaluate_scenarios(model: &FleetModel, scenarios: &[&Scenario]) -> Result<EvalReport> {
    check_agents(model, scenarios)?;
    let preds: Vec<Result<Prediction>> = scenarios
        .par_iter()
        .map(|s| {
            let z = logits(model, s)?;
            Ok(Prediction {
                id: s.id.clone(),
                label: s.label,
                predicted: argmax2(z),
                logits: z,
            })
        })
        .collect();
    EvalReport::from_predictions(preds.into_iter().collect::<Result<_>>()?)
}

/// Accuracy of `model` on one split. Fails if `v2x` is not the
/// configuration the model was built for.
pub fn evaluate(model: &FleetModel, dataset: &Dataset, split: Split, v2x: &V2XConfig) -> Result<EvalReport> {
    model.check_v2x(v2x)?;
    evaluate_scenarios(model, &dataset.split(split))
}

const SHUFFLE_STREAM: u64 = 0x5bff;

/// Mini-batch focal-loss training. Returns the parameters of the epoch with
/// the best validation accuracy (earliest on ties).
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_log(dataset, model_cfg, cfg, |_| {})
}

pub fn train_with_log(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = FleetModel::init(model_cfg, &cfg.v2x, cfg.seed)?;
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Val);
    check_agents(&model, &train_set)?;
    check_agents(&model, &val_set)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            metrics: Vec::new(),
            best_epoch: 0,
        });
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("train and val splits must be non-empty".into()));
    }

    let spe = train_set.len().div_ceil(cfg.batch_size);
    let mut adam = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = Rng::derive(cfg.seed, SHUFFLE_STREAM);
    let mut best: Option<(f64, usize, FleetModel)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Grads)>> = batch
                .par_iter()
                .map(|&i| loss_and_grads(&model, train_set[i], &cfg.loss))
                .collect();
            let mut grads = Grads::new(&model.store);
            for r in results {
                let (l, g) = r?;
                loss_sum += l;
                grads.merge(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            lr = cfg.lr(step, spe);
            adam_step(&mut model.store, &grads, &mut adam, lr)?;
            step += 1;
        }
        let val = evaluate_scenarios(&model, &val_set)?;
        let m = EpochMetrics {
            epoch,
            mean_train_loss: loss_sum / train_set.len() as f64,
            val_accuracy: val.accuracy,
            lr,
        };
        on_epoch(&m);
        if best.as_ref().is_none_or(|(acc, _, _)| val.accuracy > *acc) {
            best = Some((val.accuracy, epoch, model.clone()));
        }
        metrics.push(m);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        metrics,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub v2x: V2XConfig,
    pub seed: u64,
    pub accuracy: f64,
}

impl AblationRow {
    fn behind_count(&self) -> usize {
        [AgentRole::BehindEgo, AgentRole::BehindOther]
            .iter()
            .filter(|r| self.v2x.contains(**r))
            .count()
    }
}

const ABLATION_STREAM: u64 = 0xab1a;

/// Init/shuffle seed used for row `row` of an ablation.
pub fn ablation_seed(seed: u64, row: usize) -> u64 {
    Rng::derive(seed, ABLATION_STREAM + row as u64).next_u64()
}

/// Train and test one model per configuration.
pub fn ablate(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    configs: &[V2XConfig],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for (i, v2x) in configs.iter().enumerate() {
        let row_cfg = TrainConfig {
            seed: ablation_seed(cfg.seed, i),
            v2x: v2x.clone(),
            ..cfg.clone()
        };
        let outcome = train(dataset, model_cfg, &row_cfg)?;
        let report = evaluate(&outcome.model, dataset, Split::Test, v2x)?;
        rows.push(AblationRow {
            v2x: v2x.clone(),
            seed: row_cfg.seed,
            accuracy: report.accuracy,
        });
    }
    Ok(rows)
}

/// CSV with columns `ego,other,behind,infrastructure,accuracy`. Presence is
/// 0/1, except `behind`, which counts the included vehicles behind (0..=2).
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("ego,other,behind,infrastructure,accuracy\n");
    for r in rows {
        let flag = |role| u8::from(r.v2x.contains(role));
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4}",
            flag(AgentRole::Ego),
            flag(AgentRole::OtherVehicle),
            r.behind_count(),
            flag(AgentRole::Infrastructure),
            r.accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthesize;
    use crate::qformer::MotionQformerConfig;
    use crate::scenario::ScenarioFamily;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            qformer: MotionQformerConfig {
                model_dim: 8,
                num_queries: 2,
                num_blocks: 1,
                num_heads: 2,
                ..Default::default()
            },
            feature_dim: 4,
            head_hidden: 8,
            freeze_encoder: false,
        }
    }

    fn tiny_data(count: usize, seed: u64) -> Dataset {
        let fam = ScenarioFamily {
            frames: 2,
            agents: vec![AgentRole::Ego, AgentRole::OtherVehicle],
            patches: 2,
            feature_dim: 4,
            ..Default::default()
        };
        synthesize(count, &[fam], seed).unwrap()
    }

    fn pred(label: u8, predicted: u8) -> Prediction {
        Prediction {
            id: String::new(),
            label,
            predicted,
            logits: [0.0; 2],
        }
    }

    #[test]
    fn accuracy_formula() {
        let mut p = Vec::new();
        p.extend((0..30).map(|_| pred(1, 1)));
        p.extend((0..40).map(|_| pred(0, 0)));
        p.extend((0..20).map(|_| pred(0, 1)));
        p.extend((0..10).map(|_| pred(1, 0)));
        let r = EvalReport::from_predictions(p).unwrap();
        assert_eq!((r.tp, r.tn, r.fp, r.fn_), (30, 40, 20, 10));
        assert!((r.accuracy - 0.70).abs() < 1e-15);
        assert_eq!(r.total(), 100);
    }

    #[test]
    fn argmax_ties_and_scale() {
        assert_eq!(argmax2([1.0, 1.0]), 0);
        assert_eq!(argmax2([0.0, 1e-9]), 1);
        for z in [[0.3, -0.2], [-1.0, 2.0]] {
            for c in [0.01, 1.0, 100.0] {
                assert_eq!(argmax2(z), argmax2([z[0] * c, z[1] * c]));
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let ds = tiny_data(12, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&ds, &tiny_model(), &cfg).unwrap();
        let init = FleetModel::init(&tiny_model(), &cfg.v2x, cfg.seed).unwrap();
        assert_eq!(out.model.store.to_named(), init.store.to_named());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let ds = tiny_data(24, 2);
        let cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            peak_lr: 1e-2,
            floor_lr: 1e-3,
            ..Default::default()
        };
        let a = train(&ds, &tiny_model(), &cfg).unwrap();
        let b = train(&ds, &tiny_model(), &cfg).unwrap();
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(metrics_jsonl(&a.metrics).unwrap(), metrics_jsonl(&b.metrics).unwrap());
        assert_eq!(a.model.store.to_named(), b.model.store.to_named());
        assert!((1..=3).contains(&a.best_epoch));
        let ra = evaluate(&a.model, &ds, Split::Test, &cfg.v2x).unwrap();
        let rb = evaluate(&b.model, &ds, Split::Test, &cfg.v2x).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.total(), ds.manifest.splits.test.len());
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let ds = tiny_data(16, 3);
        let model_cfg = ModelConfig {
            freeze_encoder: true,
            ..tiny_model()
        };
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            peak_lr: 1e-2,
            floor_lr: 1e-3,
            ..Default::default()
        };
        let init = FleetModel::init(&model_cfg, &cfg.v2x, cfg.seed).unwrap();
        let out = train(&ds, &model_cfg, &cfg).unwrap();
        let w = init.encoder.proj.weight;
        assert!(out.model.store.get(w).bit_eq(init.store.get(w)));
        let q = init.qformer.base_query;
        assert!(!out.model.store.get(q).bit_eq(init.store.get(q)));
    }

    #[test]
    fn missing_agent_is_incompatible() {
        let fam = ScenarioFamily {
            agents: vec![AgentRole::Ego],
            frames: 1,
            patches: 2,
            feature_dim: 4,
            ..Default::default()
        };
        let ds = synthesize(10, &[fam], 0).unwrap();
        let cfg = TrainConfig {
            v2x: V2XConfig::new([AgentRole::Ego, AgentRole::OtherVehicle]).unwrap(),
            ..Default::default()
        };
        let err = train(&ds, &tiny_model(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Compatibility(_)), "{err}");
    }

    #[test]
    fn evaluate_rejects_other_config() {
        let ds = tiny_data(12, 4);
        let model = FleetModel::init(&tiny_model(), &V2XConfig::ego_only(), 0).unwrap();
        let both = V2XConfig::new([AgentRole::Ego, AgentRole::OtherVehicle]).unwrap();
        assert!(matches!(
            evaluate(&model, &ds, Split::Test, &both),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig {
            warmup_epochs: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            floor_lr: 1e-3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let ok = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn csv_layout() {
        let rows: Vec<AblationRow> = V2XConfig::table_rows()
            .into_iter()
            .enumerate()
            .map(|(i, v2x)| AblationRow {
                v2x,
                seed: i as u64,
                accuracy: 0.5,
            })
            .collect();
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "ego,other,behind,infrastructure,accuracy");
        assert_eq!(&lines[1..], ["1,0,0,0,0.5000", "1,1,0,0,0.5000", "1,1,0,1,0.5000", "1,1,2,0,0.5000"]);
    }
}
