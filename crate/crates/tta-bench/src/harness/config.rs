//! Experiment configuration: a TOML file describing what to run, with
//! `key=value` command-line overrides applied on top.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::selection::{Protocol, SelectionRule, DEFAULT_STEPS};

/// Environment variable that, when set, overrides the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "TTA_BENCH_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario name, e.g. "common_shifts" or "label_shift_a0.01".
    pub scenario: String,
    /// Architecture name from the model zoo, e.g. "mlp_bn".
    #[serde(default = "default_model")]
    pub model: String,
    /// Augmentation policy used when pretraining the checkpoint.
    #[serde(default = "default_policy")]
    pub policy: String,
    pub methods: Vec<String>,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_selection")]
    pub selection: SelectionRule,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed for the scenario's task and pretraining data.
    #[serde(default = "default_scenario_seed")]
    pub scenario_seed: u64,
    #[serde(default = "default_true")]
    pub include_baseline: bool,
    /// Average multi-domain streams per-domain (true) or per-sample (false).
    #[serde(default = "default_true")]
    pub domain_uniform: bool,
    #[serde(default = "default_output")]
    pub output_dir: String,
    /// Pretraining epochs for the on-the-fly checkpoint.
    #[serde(default = "default_epochs")]
    pub pretrain_epochs: usize,
    /// Per-method hyperparameter overrides, e.g. `[params.tent] fisher_lambda = 0.5`.
    #[serde(default)]
    pub params: BTreeMap<String, toml::Value>,
}

fn default_model() -> String {
    "mlp_bn".into()
}
fn default_policy() -> String {
    "standard".into()
}
fn default_protocol() -> Protocol {
    Protocol::Episodic
}
fn default_selection() -> SelectionRule {
    SelectionRule::Oracle
}
fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_lr() -> f64 {
    1e-3
}
fn default_seeds() -> Vec<u64> {
    super::DEFAULT_SEEDS.to_vec()
}
fn default_scenario_seed() -> u64 {
    5
}
fn default_true() -> bool {
    true
}
fn default_output() -> String {
    "runs".into()
}
fn default_epochs() -> usize {
    12
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "common_shifts".into(),
            model: default_model(),
            policy: default_policy(),
            methods: vec!["bn_adapt".into(), "tent".into()],
            protocol: default_protocol(),
            selection: default_selection(),
            steps: default_steps(),
            learning_rate: default_lr(),
            seeds: default_seeds(),
            scenario_seed: default_scenario_seed(),
            include_baseline: true,
            domain_uniform: true,
            output_dir: default_output(),
            pretrain_epochs: default_epochs(),
            params: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML string, applying `key=value` overrides afterwards.
    /// Override keys use dotted paths (`params.tent.fisher_lambda=0.5`);
    /// values are parsed as TOML, falling back to a bare string.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| HarnessError::Config(format!("invalid TOML: {e}")))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{ov}` is not key=value")))?;
            let value = parse_value(raw);
            insert_path(&mut table, key.trim(), value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty() && !self.include_baseline {
            return Err(HarnessError::Config("no methods to run".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must be non-empty".into()));
        }
        if self.steps == 0 {
            return Err(HarnessError::Config("steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(HarnessError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Output root: the `TTA_BENCH_OUT` environment variable wins over the
    /// configured `output_dir`.
    pub fn output_root(&self) -> std::path::PathBuf {
        match std::env::var(OUTPUT_ROOT_ENV) {
            Ok(v) if !v.is_empty() => v.into(),
            _ => self.output_dir.clone().into(),
        }
    }

    /// Per-method parameters converted to JSON for `build_strategy`.
    pub fn params_json(&self) -> BTreeMap<String, serde_json::Value> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), toml_to_json(v)))
            .collect()
    }

    pub fn eval_settings(&self) -> super::EvalSettings {
        super::EvalSettings {
            methods: self.methods.clone(),
            params: self.params_json(),
            protocols: vec![(self.protocol, self.selection)],
            seeds: self.seeds.clone(),
            learning_rate: self.learning_rate,
            steps: self.steps,
            include_baseline: self.include_baseline,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn insert_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), HarnessError> {
    let mut parts = path.split('.').collect::<Vec<_>>();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key `{path}`")));
    }
    let last = parts.pop().unwrap();
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            HarnessError::Config(format!("override key `{path}` crosses a non-table value"))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn toml_to_json(v: &toml::Value) -> serde_json::Value {
    match v {
        toml::Value::String(s) => serde_json::Value::String(s.clone()),
        toml::Value::Integer(i) => (*i).into(),
        toml::Value::Float(f) => serde_json::Number::from_f64(*f)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null),
        toml::Value::Boolean(b) => serde_json::Value::Bool(*b),
        toml::Value::Datetime(d) => serde_json::Value::String(d.to_string()),
        toml::Value::Array(a) => serde_json::Value::Array(a.iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => serde_json::Value::Object(
            t.iter().map(|(k, v)| (k.clone(), toml_to_json(v))).collect(),
        ),
    }
}
