//! Experiment runner: ties streams, methods, selection, and pretraining
//! into records on disk, summary tables, and figures.

pub mod config;
pub mod records;
pub mod reports;
pub mod scenarios;

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::methods::{build_strategy, MethodError, SgdMomentum, Strategy};
use crate::model::{AdaptiveModel, StatsMode};
use crate::pretrain::PretrainError;
use crate::selection::{
    run_protocol, Protocol, ProtocolConfig, SelectionError, SelectionRule,
};
use crate::streams::{build_stream, StreamError};

pub use records::{config_hash, load_records, persist_records, RunRecord, SCHEMA_VERSION};
pub use reports::{sensitivity_heatmap, trace_stats, trace_svg, TraceStats};
pub use scenarios::Scenario;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("schema version {found} (this build reads {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("no records to report on")]
    EmptyRecords,
    #[error("grid table does not cover the full learning-rate x steps grid")]
    IncompleteGrid,
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
}

/// Name under which the no-adaptation reference rows are recorded.
pub const BASELINE_METHOD: &str = "baseline";
/// Seeds used by default, one run per seed.
pub const DEFAULT_SEEDS: [u64; 3] = [2022, 2023, 2024];

/// The no-adapt reference: predicts with frozen parameters and statistics.
struct SourceBaseline;

impl Strategy for SourceBaseline {
    fn meta(&self) -> crate::methods::MethodMeta {
        crate::methods::MethodMeta {
            name: "baseline",
            resets_model: false,
            requires_norm_stats: false,
            adjusts_pretraining: false,
            updates: &[],
        }
    }

    fn reset(&mut self, _model: &AdaptiveModel) {}

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        _opt: &mut SgdMomentum,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        Ok(model.probs(inputs, StatsMode::Running))
    }
}

/// Everything `evaluate` needs beyond the scenario and checkpoint.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub methods: Vec<String>,
    /// Per-method hyperparameter overrides (JSON objects).
    pub params: BTreeMap<String, serde_json::Value>,
    pub protocols: Vec<(Protocol, SelectionRule)>,
    pub seeds: Vec<u64>,
    pub learning_rate: f64,
    pub steps: usize,
    pub include_baseline: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            methods: vec!["tent".into()],
            params: BTreeMap::new(),
            protocols: vec![(Protocol::Episodic, SelectionRule::Oracle)],
            seeds: DEFAULT_SEEDS.to_vec(),
            learning_rate: 1e-3,
            steps: crate::selection::DEFAULT_STEPS,
            include_baseline: true,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
struct JobKey<'a> {
    method: &'a str,
    params: &'a serde_json::Value,
    scenario: &'a str,
    model: &'a str,
    protocol: Protocol,
    selection: SelectionRule,
    seed: u64,
    learning_rate: f64,
    steps: usize,
}

fn run_one(
    model: &AdaptiveModel,
    model_name: &str,
    scenario: &Scenario,
    method: &str,
    params: &serde_json::Value,
    protocol: Protocol,
    selection: SelectionRule,
    seed: u64,
    learning_rate: f64,
    steps: usize,
) -> Result<RunRecord, HarnessError> {
    let mut spec = scenario.stream.clone();
    spec.seed = seed;
    let stream = build_stream(&spec, &scenario.task)?;
    let mut strategy: Box<dyn Strategy> = if method == BASELINE_METHOD {
        Box::new(SourceBaseline)
    } else {
        build_strategy(method, params)?
    };
    let cfg = ProtocolConfig {
        protocol,
        selection,
        steps,
        learning_rate,
        seed,
    };
    let started = Instant::now();
    let out = run_protocol(model, strategy.as_mut(), &stream, &cfg)?;
    let runtime_s = started.elapsed().as_secs_f64();
    let key = JobKey {
        method,
        params,
        scenario: &scenario.name,
        model: model_name,
        protocol,
        selection,
        seed,
        learning_rate,
        steps,
    };
    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash(&key),
        method: method.to_string(),
        scenario: scenario.name.clone(),
        model: model_name.to_string(),
        protocol,
        selection,
        seed,
        learning_rate,
        steps,
        overall_accuracy: out.mean_accuracy,
        stream_error_pct: 100.0 * (1.0 - out.mean_accuracy),
        batches: out.batches.iter().map(records::BatchEntry::from).collect(),
        annotations: scenario.annotations.clone(),
        runtime_s,
    })
}

/// Run every (method, protocol, seed) combination on one scenario, plus the
/// automatic no-adapt baseline rows. Jobs run in parallel; results come
/// back in deterministic job order.
pub fn evaluate(
    model: &AdaptiveModel,
    model_name: &str,
    scenario: &Scenario,
    settings: &EvalSettings,
) -> Result<Vec<RunRecord>, HarnessError> {
    let mut methods: Vec<String> = Vec::new();
    if settings.include_baseline {
        methods.push(BASELINE_METHOD.to_string());
    }
    for m in &settings.methods {
        if !methods.contains(m) {
            methods.push(m.clone());
        }
    }
    let null = serde_json::Value::Null;
    let mut jobs = Vec::new();
    for method in &methods {
        let baseline = method == BASELINE_METHOD;
        for &(protocol, selection) in &settings.protocols {
            // the baseline is protocol-independent: record it once per seed
            if baseline && (protocol, selection) != settings.protocols[0] {
                continue;
            }
            for &seed in &settings.seeds {
                jobs.push((method.clone(), protocol, selection, seed));
            }
        }
    }
    jobs.par_iter()
        .map(|(method, protocol, selection, seed)| {
            let params = settings.params.get(method).unwrap_or(&null);
            run_one(
                model,
                model_name,
                scenario,
                method,
                params,
                *protocol,
                *selection,
                *seed,
                settings.learning_rate,
                settings.steps,
            )
        })
        .collect()
}

/// Per-(scenario, method, protocol, selection) aggregate over seeds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub protocol: Protocol,
    pub selection: SelectionRule,
    pub n_seeds: usize,
    pub mean_error_pct: f64,
    pub std_error_pct: f64,
}

/// Aggregate records into mean +- std stream error over seeds. With
/// `domain_uniform`, multi-domain streams average their per-domain errors
/// uniformly instead of per-sample.
pub fn summarize(records: &[RunRecord], domain_uniform: bool) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.scenario.clone(),
            r.method.clone(),
            format!("{:?}/{:?}", r.protocol, r.selection),
        );
        groups.entry(key).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((scenario, method, _), rs) in groups {
        let errors: Vec<f64> = rs
            .iter()
            .map(|r| {
                let acc = if domain_uniform {
                    r.domain_uniform_accuracy()
                } else {
                    r.overall_accuracy
                };
                100.0 * (1.0 - acc)
            })
            .collect();
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        rows.push(SummaryRow {
            scenario,
            method,
            protocol: rs[0].protocol,
            selection: rs[0].selection,
            n_seeds: rs.len(),
            mean_error_pct: mean,
            std_error_pct: var.sqrt(),
        });
    }
    rows
}

/// Fixed-width text table of summary rows.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:<14} {:<10} {:<9} {:>7} {:>12}\n",
        "scenario", "method", "protocol", "selection", "seeds", "error %"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:<14} {:<10} {:<9} {:>7} {:>7.1} ± {:.1}\n",
            r.scenario,
            r.method,
            format!("{:?}", r.protocol).to_lowercase(),
            format!("{:?}", r.selection).to_lowercase(),
            r.n_seeds,
            r.mean_error_pct,
            r.std_error_pct
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{train_base, AugPolicy, ToyModelSpec, TrainConfig};

    fn trained() -> (AdaptiveModel, f64) {
        let task = scenarios::source_task(5);
        let cfg = TrainConfig {
            epochs: 10,
            train_size: 768,
            val_size: 256,
            ..Default::default()
        };
        let (model, seq) = train_base(&task, ToyModelSpec::MlpBn, AugPolicy::Standard, &cfg).unwrap();
        (model, seq.last().val_accuracy)
    }

    fn quick_settings() -> EvalSettings {
        EvalSettings {
            methods: vec!["tent".into()],
            seeds: vec![2022, 2023],
            steps: 2,
            ..Default::default()
        }
    }

    #[test]
    fn evaluate_emits_baseline_and_method_rows() {
        let (model, _) = trained();
        let scenario = scenarios::unshifted(5);
        let records = evaluate(&model, "mlp_bn", &scenario, &quick_settings()).unwrap();
        let baselines = records.iter().filter(|r| r.method == BASELINE_METHOD).count();
        let tents = records.iter().filter(|r| r.method == "tent").count();
        assert_eq!(baselines, 2);
        assert_eq!(tents, 2);
        for r in &records {
            assert!((r.recomputed_accuracy() - r.overall_accuracy).abs() < 1e-9);
            assert!(
                (r.stream_error_pct - 100.0 * (1.0 - r.overall_accuracy)).abs() < 1e-9
            );
        }
    }

    #[test]
    fn baseline_error_matches_source_validation_on_unshifted_stream() {
        let (model, val_acc) = trained();
        let scenario = scenarios::unshifted(5);
        let records = evaluate(&model, "mlp_bn", &scenario, &quick_settings()).unwrap();
        for r in records.iter().filter(|r| r.method == BASELINE_METHOD) {
            let gap = (r.overall_accuracy - val_acc).abs();
            assert!(gap < 0.02 + 0.03, "baseline {} vs val {}", r.overall_accuracy, val_acc);
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (model, _) = trained();
        let scenario = scenarios::common_shifts(5);
        let settings = quick_settings();
        let a = evaluate(&model, "mlp_bn", &scenario, &settings).unwrap();
        let b = evaluate(&model, "mlp_bn", &scenario, &settings).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            let mut x = x.clone();
            let mut y = y.clone();
            x.runtime_s = 0.0;
            y.runtime_s = 0.0;
            assert_eq!(x, y);
        }
    }

    #[test]
    fn summarize_groups_by_method() {
        let (model, _) = trained();
        let scenario = scenarios::unshifted(5);
        let records = evaluate(&model, "mlp_bn", &scenario, &quick_settings()).unwrap();
        let rows = summarize(&records, true);
        assert_eq!(rows.len(), 2); // baseline + tent
        for row in &rows {
            assert_eq!(row.n_seeds, 2);
            assert!(row.std_error_pct >= 0.0);
        }
        let table = summary_table(&rows);
        assert!(table.contains("baseline"));
        assert!(table.contains("tent"));
    }
}
