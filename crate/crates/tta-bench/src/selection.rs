//! Oracle model selection over adaptation trajectories, and the evaluation
//! protocols that consume it.
//!
//! For each test batch the adapting method produces a short trajectory of
//! candidate states: the state it entered the batch with, plus one state per
//! additional optimization step. The oracle scores every candidate against
//! the batch labels and keeps the best one (ties go to the earliest state),
//! which upper-bounds what any label-free selection heuristic could achieve.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::methods::{MethodError, SgdMomentum, Strategy};
use crate::model::{AdaptiveModel, CoreError, ModelState};
use crate::num::accuracy;
use crate::streams::TestBatch;

/// Learning-rate grid used by the hyperparameter sweep.
pub const LR_GRID: [f64; 5] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2];
/// Step-budget grid used by the hyperparameter sweep.
pub const STEPS_GRID: [usize; 7] = [1, 2, 3, 5, 10, 25, 50];
/// Default per-batch step budget.
pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("stream is empty")]
    EmptyStream,
    #[error("batch has no labels")]
    EmptyBatch,
    #[error("step budget must be positive")]
    ZeroSteps,
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Re-start from the source state on every batch.
    Episodic,
    /// Carry adapted state across batches.
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Label-informed argmax over the candidate trajectory.
    Oracle,
    /// Take whatever state the step budget ends on.
    Last,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub selection: SelectionRule,
    /// Adaptation steps per batch (trajectory length).
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol, selection: SelectionRule) -> Self {
        ProtocolConfig {
            protocol,
            selection,
            steps: DEFAULT_STEPS,
            learning_rate: 1e-3,
            seed: 2022,
        }
    }
}

/// Everything that must travel with a candidate state for the trajectory to
/// be re-enterable: model parameters and statistics, plus the strategy's and
/// optimizer's internal state.
fn bundle(model: &AdaptiveModel, strategy: &dyn Strategy, opt: &SgdMomentum) -> ModelState {
    let mut snap = model.snapshot();
    snap.aux_state = serde_json::json!({
        "strategy": strategy.state_json(),
        "optimizer": opt.state_json(),
    });
    snap
}

fn restore_bundle(
    state: &ModelState,
    model: &mut AdaptiveModel,
    strategy: &mut dyn Strategy,
    opt: &mut SgdMomentum,
) -> Result<(), SelectionError> {
    model.restore(state)?;
    let null = serde_json::Value::Null;
    let strat = state.aux_state.get("strategy").unwrap_or(&null);
    strategy.load_state_json(strat)?;
    let optv = state.aux_state.get("optimizer").unwrap_or(&null);
    opt.load_state_json(optv);
    Ok(())
}

/// Outcome of selecting over one batch's trajectory.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    /// Index into the trajectory: 0 is the entering state.
    pub selected_step: usize,
    /// Scored predictions of the selected state.
    pub predictions: Array2<f64>,
    /// Batch accuracy of every candidate, entering state first.
    pub scores: Vec<f64>,
}

/// Run `steps` adaptation steps on one batch and keep the candidate whose
/// predictions score highest against the labels; ties go to the earliest
/// candidate. The model, strategy, and optimizer are left in the selected
/// state.
pub fn oracle_select(
    model: &mut AdaptiveModel,
    strategy: &mut dyn Strategy,
    opt: &mut SgdMomentum,
    inputs: &Array2<f64>,
    labels: &[usize],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionOutcome, SelectionError> {
    if labels.is_empty() {
        return Err(SelectionError::EmptyBatch);
    }
    if steps == 0 {
        return Err(SelectionError::ZeroSteps);
    }
    let mut candidates = vec![bundle(model, strategy, opt)];
    let mut preds = vec![strategy.predict(model, inputs)];
    for _ in 0..steps {
        strategy.adapt(model, inputs, opt, rng)?;
        candidates.push(bundle(model, strategy, opt));
        preds.push(strategy.predict(model, inputs));
    }
    let scores: Vec<f64> = preds.iter().map(|p| accuracy(p, labels)).collect();
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    restore_bundle(&candidates[best], model, strategy, opt)?;
    Ok(SelectionOutcome {
        selected_step: best,
        predictions: preds[best].clone(),
        scores,
    })
}

/// Run `steps` adaptation steps and keep the final state, scoring the last
/// step's emitted predictions. No labels are consulted.
pub fn last_step(
    model: &mut AdaptiveModel,
    strategy: &mut dyn Strategy,
    opt: &mut SgdMomentum,
    inputs: &Array2<f64>,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, SelectionError> {
    if steps == 0 {
        return Err(SelectionError::ZeroSteps);
    }
    let mut preds = None;
    for _ in 0..steps {
        preds = Some(strategy.adapt(model, inputs, opt, rng)?);
    }
    Ok(preds.unwrap())
}

/// Per-batch result of a protocol run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub batch_index: usize,
    pub slot_id: usize,
    /// Samples in the batch.
    pub n: usize,
    pub accuracy: f64,
    /// Mean prediction entropy of the scored predictions.
    pub mean_entropy: f64,
    /// Mean negative log-likelihood of the true labels.
    pub loss: f64,
    /// Trajectory index chosen by the oracle; equals `steps` under `Last`.
    pub selected_step: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub batches: Vec<BatchOutcome>,
    pub mean_accuracy: f64,
    /// Model state after the final batch (source state under `Episodic`
    /// protocols, there per-batch adaptation is discarded at batch end).
    pub final_state: ModelState,
}

fn batch_rng(seed: u64, batch_index: usize) -> ChaCha8Rng {
    // decorrelate per-batch streams; independent of batch order
    ChaCha8Rng::seed_from_u64(seed ^ (batch_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Evaluate a strategy over a stream under the given protocol and selection
/// rule. The source model is never mutated.
pub fn run_protocol(
    source: &AdaptiveModel,
    strategy: &mut dyn Strategy,
    stream: &[TestBatch],
    cfg: &ProtocolConfig,
) -> Result<RunOutcome, SelectionError> {
    if stream.is_empty() {
        return Err(SelectionError::EmptyStream);
    }
    let mut model = source.clone();
    let mut opt = SgdMomentum::new(crate::methods::OptimizerConfig::with_lr(cfg.learning_rate));
    strategy.reset(&model);
    let entry = bundle(&model, strategy, &opt);
    let mut batches = Vec::with_capacity(stream.len());
    for batch in stream {
        if cfg.protocol == Protocol::Episodic {
            restore_bundle(&entry, &mut model, strategy, &mut opt)?;
            opt.reset_buffers();
        }
        let mut rng = batch_rng(cfg.seed, batch.batch_index);
        let (preds, selected_step) = match cfg.selection {
            SelectionRule::Oracle => {
                let out = oracle_select(
                    &mut model,
                    strategy,
                    &mut opt,
                    &batch.inputs,
                    &batch.labels,
                    cfg.steps,
                    &mut rng,
                )?;
                (out.predictions, out.selected_step)
            }
            SelectionRule::Last => {
                let preds = last_step(
                    &mut model,
                    strategy,
                    &mut opt,
                    &batch.inputs,
                    cfg.steps,
                    &mut rng,
                )?;
                (preds, cfg.steps)
            }
        };
        let loss = batch
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -preds[[i, y]].max(crate::num::PROB_FLOOR).ln())
            .sum::<f64>()
            / batch.labels.len() as f64;
        batches.push(BatchOutcome {
            batch_index: batch.batch_index,
            slot_id: batch.slot_id,
            n: batch.labels.len(),
            accuracy: accuracy(&preds, &batch.labels),
            mean_entropy: crate::num::mean_entropy(&preds),
            loss,
            selected_step,
        });
    }
    let total: usize = batches.iter().map(|b| b.n).sum();
    let mean_accuracy =
        batches.iter().map(|b| b.accuracy * b.n as f64).sum::<f64>() / total as f64;
    let final_state = if cfg.protocol == Protocol::Episodic {
        let mut m = source.clone();
        m.restore(&entry).expect("own snapshot");
        m.snapshot()
    } else {
        model.snapshot()
    };
    Ok(RunOutcome {
        batches,
        mean_accuracy,
        final_state,
    })
}

// ------------------------------------------------------------------- sweeps

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub steps: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub points: Vec<GridPoint>,
    pub best_learning_rate: f64,
    pub best_steps: usize,
    pub best_accuracy: f64,
}

impl GridSearchResult {
    /// `learning_rate,steps,mean_accuracy` rows in grid order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("learning_rate,steps,mean_accuracy\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{}\n",
                p.learning_rate, p.steps, p.mean_accuracy
            ));
        }
        out
    }
}

/// Sweep the learning-rate x step-budget grid, rebuilding the strategy for
/// every point. Ties prefer the earlier grid point (smaller rate, then
/// fewer steps).
pub fn grid_search(
    source: &AdaptiveModel,
    method: &str,
    params: &serde_json::Value,
    stream: &[TestBatch],
    base: &ProtocolConfig,
    lr_grid: &[f64],
    steps_grid: &[usize],
) -> Result<GridSearchResult, SelectionError> {
    let mut points = Vec::new();
    let mut best: Option<usize> = None;
    for &lr in lr_grid {
        for &steps in steps_grid {
            let mut cfg = base.clone();
            cfg.learning_rate = lr;
            cfg.steps = steps;
            let mut strategy = crate::methods::build_strategy(method, params)?;
            let out = run_protocol(source, strategy.as_mut(), stream, &cfg)?;
            points.push(GridPoint {
                learning_rate: lr,
                steps,
                mean_accuracy: out.mean_accuracy,
            });
            let i = points.len() - 1;
            if best.is_none() || points[i].mean_accuracy > points[best.unwrap()].mean_accuracy {
                best = Some(i);
            }
        }
    }
    let b = best.ok_or(SelectionError::EmptyStream)?;
    Ok(GridSearchResult {
        best_learning_rate: points[b].learning_rate,
        best_steps: points[b].steps,
        best_accuracy: points[b].mean_accuracy,
        points,
    })
}
