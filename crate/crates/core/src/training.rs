//! The training loop: a labeled step then an unlabeled step per iteration.
//!
//! The labeled step updates every parameter. The unlabeled step derives
//! pseudo-labels from the gates and updates the experts and the task
//! uncertainties only; gate parameters enter that step as constants.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use semimoe_autograd::Tape;

use crate::checkpoint::{BestScore, TrainState};
use crate::config::TrainConfig;
use crate::data::{self, apply_partition, make_batch, Batch, Dataset, Sample, SplitSpec, Transform};
use crate::error::{Error, Result};
use crate::evaluation::{column_means, evaluate, EvalResult};
use crate::gating::Mode;
use crate::losses::{
    lambda_schedule, make_pseudo_labels, supervised_objective, supervised_task_losses, total_loss,
    unsupervised_objective, unsupervised_task_losses, LossBreakdown, UncertaintyParams,
};
use crate::model::is_gate_param;
use crate::optim::learning_rate;
use crate::seed::step_seed;
use crate::task::Task;

/// Scalars from one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Batch-mean expert weights per gated task.
    pub gate_weights: BTreeMap<Task, Vec<f64>>,
}

/// One step on a labeled batch; updates experts, heads, gates and σ.
pub fn supervised_step(state: &mut TrainState, batch: &Batch, lr: f64, dropout_seed: u64) -> Result<StepOutcome> {
    let labels = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::Data("supervised step needs a fully labeled batch".into()))?;
    let cfg = &state.config;
    let sigma = state.model.uncertainty();
    let (losses, grads, gate_weights) = {
        let tape = Tape::new();
        let p = state.model.store.bind(&tape, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let out = state.model.forward(&p, tape.constant(batch.images.clone()), &mut Mode::Train(&mut rng))?;
        let losses = supervised_task_losses(&out.experts, &out.gates, labels, cfg.dice_smooth)?;
        let objective = supervised_objective(&losses, &p, cfg.weighting())?;
        let grads = p.gradients(&tape.backward(objective));
        let weights = out.gates.iter().map(|g| (g.task, column_means(&g.weights.value()))).collect();
        (losses.values(), grads, weights)
    };
    state.optimizer.step(&mut state.model.store, &grads, lr);
    let breakdown = total_loss(&losses, &BTreeMap::new(), &sigma, cfg.weighting(), 0.0, cfg.lambda_scope);
    Ok(StepOutcome { breakdown, gate_weights })
}

/// One step on an unlabeled batch with gate-derived pseudo-labels, scaled by
/// `lambda`. Gate parameters are bit-unchanged afterwards.
pub fn unsupervised_step(
    state: &mut TrainState,
    batch: &Batch,
    lr: f64,
    lambda: f64,
    dropout_seed: u64,
) -> Result<StepOutcome> {
    let cfg = &state.config;
    let sigma = state.model.uncertainty();
    let (losses, grads, gate_weights) = {
        let tape = Tape::new();
        let p = state.model.store.bind(&tape, |name| !is_gate_param(name));
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let out = state.model.forward(&p, tape.constant(batch.images.clone()), &mut Mode::Train(&mut rng))?;
        let pseudo = make_pseudo_labels(&out.gates, cfg.single_gate)?;
        let losses = unsupervised_task_losses(&out.experts, &pseudo, cfg.dice_smooth)?;
        let objective = unsupervised_objective(&losses, &p, cfg.weighting(), lambda, cfg.lambda_scope)?;
        let grads = p.gradients(&tape.backward(objective));
        let weights = out.gates.iter().map(|g| (g.task, column_means(&g.weights.value()))).collect();
        (losses.values(), grads, weights)
    };
    debug_assert!(grads.keys().all(|n| !is_gate_param(n)));
    state.optimizer.step(&mut state.model.store, &grads, lr);
    let breakdown = total_loss(&BTreeMap::new(), &losses, &sigma, cfg.weighting(), lambda, cfg.lambda_scope);
    Ok(StepOutcome { breakdown, gate_weights })
}

/// Labeled, unlabeled and test samples for one run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TrainData {
    /// Splits the train pool according to the config's ratio, fold and split seed.
    pub fn from_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let part = data::split(ds.train.len(), &split_spec(cfg))?;
        let (labeled, unlabeled) = apply_partition(&ds.train, &part);
        Ok(Self {
            labeled,
            unlabeled,
            test: ds.test.clone(),
        })
    }
}

pub fn split_spec(cfg: &TrainConfig) -> SplitSpec {
    SplitSpec {
        labeled_ratio: cfg.labeled_ratio,
        fold: cfg.fold,
        n_folds: cfg.n_folds,
        seed: cfg.split_seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss: LossBreakdown,
    /// Batch-mean expert weights per gate, from the labeled step.
    pub gate_weights: BTreeMap<Task, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub iter: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub gate_dice: Option<f64>,
    pub gate_jaccard: Option<f64>,
    pub gate_weights: BTreeMap<Task, Vec<f64>>,
    pub best: bool,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Iter(IterRecord),
    Eval(EvalRecord),
}

impl MetricRecord {
    pub fn position(&self) -> (usize, usize) {
        match self {
            MetricRecord::Iter(r) => (r.epoch, r.iter),
            MetricRecord::Eval(r) => (r.epoch, r.iter),
        }
    }
}

/// Hooks for persisting progress while training runs.
pub trait Observer {
    fn record(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }

    /// Called right after an evaluation that improved the best test Dice.
    fn new_best(&mut self, _state: &TrainState, _eval: &EvalResult) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Default)]
pub struct Collect {
    pub records: Vec<MetricRecord>,
}

impl Observer for Collect {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub best: Option<BestScore>,
    pub best_eval: Option<EvalResult>,
    pub last_eval: Option<EvalResult>,
}

pub fn iters_per_epoch(cfg: &TrainConfig, n_labeled: usize) -> usize {
    if cfg.iters_per_epoch > 0 {
        cfg.iters_per_epoch
    } else {
        n_labeled.div_ceil(cfg.batch_size).max(1)
    }
}

fn draw_batch(pool: &[Sample], cfg: &TrainConfig, stream: &str, it: u64, augment: bool) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, &format!("sample.{stream}"), it));
    let picks = data::sample_with_replacement(pool.len(), cfg.batch_size, &mut rng);
    let samples = picks
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            if augment {
                let seed = step_seed(cfg.seed, &format!("augment.{stream}"), it * cfg.batch_size as u64 + j as u64);
                let mut arng = ChaCha8Rng::seed_from_u64(seed);
                let s = &pool[i];
                Transform::random(&mut arng, s.height(), s.width(), cfg.crop_fraction).apply(s)
            } else {
                Ok(pool[i].clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    make_batch(&samples)
}

/// Runs the remaining epochs of `state`. Every random draw is keyed by the
/// root seed and the iteration index, so a run resumed from a checkpoint
/// continues exactly as the uninterrupted run would.
pub fn train(state: &mut TrainState, data: &TrainData, observer: &mut dyn Observer) -> Result<TrainSummary> {
    if data.labeled.is_empty() {
        return Err(Error::Data("no labeled training images".into()));
    }
    let cfg = state.config.clone();
    let per_epoch = iters_per_epoch(&cfg, data.labeled.len());
    let total_iters = per_epoch * cfg.epochs;
    let ramp = cfg.ramp_epochs();
    let run_unsup = !data.unlabeled.is_empty() && cfg.lambda_max > 0.0;
    let mut summary = TrainSummary {
        best: state.best,
        best_eval: None,
        last_eval: None,
    };

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lambda = lambda_schedule(epoch, cfg.lambda_max, ramp);
        for _ in 0..per_epoch {
            let it = state.iteration;
            let lr = learning_rate(cfg.lr, cfg.lr_schedule, it, total_iters);
            let labeled = draw_batch(&data.labeled, &cfg, "labeled", it as u64, cfg.augment)?;
            let sup = supervised_step(state, &labeled, lr, step_seed(cfg.seed, "dropout.sup", it as u64))?;
            let unsup = if run_unsup {
                let batch = draw_batch(&data.unlabeled, &cfg, "unlabeled", it as u64, cfg.augment && cfg.augment_unlabeled)?;
                let seed = step_seed(cfg.seed, "dropout.unsup", it as u64);
                Some(unsupervised_step(state, &batch, lr, lambda, seed)?)
            } else {
                None
            };
            let sigma_start = UncertaintyParams {
                values: sup.breakdown.sigma.clone(),
            };
            let loss = total_loss(
                &sup.breakdown.sup,
                &unsup.as_ref().map(|u| u.breakdown.unsup.clone()).unwrap_or_default(),
                &sigma_start,
                cfg.weighting(),
                if run_unsup { lambda } else { 0.0 },
                cfg.lambda_scope,
            );
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite loss at iteration {it}")));
            }
            state.iteration += 1;
            observer.record(&MetricRecord::Iter(IterRecord {
                epoch,
                iter: it,
                lr,
                lambda,
                loss,
                gate_weights: sup.gate_weights,
            }))?;
        }
        state.epoch += 1;

        let due = state.epoch.is_multiple_of(cfg.eval_every) || state.epoch == cfg.epochs;
        if due && !data.test.is_empty() {
            let eval = evaluate(&state.model, &data.test)?;
            let improved = state.best.is_none_or(|b| eval.dice > b.dice);
            if improved {
                state.best = Some(BestScore {
                    epoch: state.epoch,
                    dice: eval.dice,
                });
                summary.best = state.best;
                summary.best_eval = Some(eval.clone());
            }
            observer.record(&MetricRecord::Eval(EvalRecord {
                epoch,
                iter: state.iteration - 1,
                dice: eval.dice,
                jaccard: eval.jaccard,
                gate_dice: eval.gate_dice,
                gate_jaccard: eval.gate_jaccard,
                gate_weights: eval.gate_weights.clone(),
                best: improved,
            }))?;
            if improved {
                observer.new_best(state, &eval)?;
            }
            summary.last_eval = Some(eval);
        }
        observer.epoch_end(state)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::model::GATE_PREFIX;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            depth: 2,
            base_channels: 4,
            epochs: 2,
            iters_per_epoch: 2,
            labeled_ratio: 0.25,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(cfg: &TrainConfig) -> TrainData {
        let ds = Dataset::synthetic(8, 2, 32, 1).unwrap();
        TrainData::from_dataset(&ds, cfg).unwrap()
    }

    #[test]
    fn phase_discipline() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let mut state = TrainState::new(cfg).unwrap();
        let unl = make_batch(&data.unlabeled[..2]).unwrap();
        let before = state.model.store.clone();
        let out = unsupervised_step(&mut state, &unl, 0.05, 5.0, 1).unwrap();
        assert!(state.model.store.bit_eq_prefix(&before, GATE_PREFIX));
        assert!(!state.model.store.bit_eq_prefix(&before, "expert.seg."));
        assert!(out.breakdown.unsup.values().all(|v| v.is_finite() && *v >= 0.0));

        let lab = make_batch(&data.labeled).unwrap();
        let before = state.model.store.clone();
        supervised_step(&mut state, &lab, 0.05, 2).unwrap();
        assert!(!state.model.store.bit_eq_prefix(&before, GATE_PREFIX));
        assert_ne!(state.model.uncertainty(), crate::model::SemiMoe::new(&state.config).unwrap().uncertainty());
    }

    #[test]
    fn supervised_step_requires_labels() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let mut state = TrainState::new(cfg).unwrap();
        let unl = make_batch(&data.unlabeled[..2]).unwrap();
        assert!(matches!(supervised_step(&mut state, &unl, 0.05, 0), Err(Error::Data(_))));
    }

    #[test]
    fn stream_positions_increase_and_lambda_follows_schedule() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let mut state = TrainState::new(cfg.clone()).unwrap();
        let mut sink = Collect::default();
        train(&mut state, &data, &mut sink).unwrap();
        let pos: Vec<_> = sink.records.iter().map(MetricRecord::position).collect();
        assert!(pos.windows(2).all(|w| w[0] <= w[1]));
        for r in &sink.records {
            if let MetricRecord::Iter(r) = r {
                assert_eq!(r.lambda, lambda_schedule(r.epoch, cfg.lambda_max, cfg.ramp_epochs()));
                assert!((r.loss.recomposed() - r.loss.total).abs() < 1e-9);
            }
        }
        assert_eq!(sink.records.iter().filter(|r| matches!(r, MetricRecord::Eval(_))).count(), 2);
        let line = serde_json::to_string(&sink.records[0]).unwrap();
        assert_eq!(serde_json::from_str::<MetricRecord>(&line).unwrap(), sink.records[0]);
    }

    #[test]
    fn fully_labeled_run_completes() {
        let cfg = TrainConfig {
            labeled_ratio: 1.0,
            epochs: 1,
            ..tiny_cfg()
        };
        let data = tiny_data(&cfg);
        assert!(data.unlabeled.is_empty());
        let mut state = TrainState::new(cfg).unwrap();
        let s = train(&mut state, &data, &mut Collect::default()).unwrap();
        assert!(s.best.is_some());
    }
}
