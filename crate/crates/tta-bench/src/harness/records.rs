//! Persisted run artifacts: one line-delimited JSON record per run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::selection::{BatchOutcome, Protocol, SelectionRule};

use super::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

/// One line of the per-batch trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub batch_index: usize,
    pub slot_id: usize,
    pub n: usize,
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub loss: f64,
    pub selected_step: usize,
}

impl From<&BatchOutcome> for BatchEntry {
    fn from(b: &BatchOutcome) -> Self {
        BatchEntry {
            batch_index: b.batch_index,
            slot_id: b.slot_id,
            n: b.n,
            accuracy: b.accuracy,
            mean_entropy: b.mean_entropy,
            loss: b.loss,
            selected_step: b.selected_step,
        }
    }
}

/// A complete run: identifiers, configuration fingerprint, per-batch trace,
/// and the aggregate error. Wall-clock runtime is carried in memory but not
/// serialized, so persisted records are bitwise reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub method: String,
    pub scenario: String,
    pub model: String,
    pub protocol: Protocol,
    pub selection: SelectionRule,
    pub seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Sample-weighted mean of batch accuracies.
    pub overall_accuracy: f64,
    /// `100 * (1 - overall_accuracy)`.
    pub stream_error_pct: f64,
    pub batches: Vec<BatchEntry>,
    /// Free-form metadata, e.g. paper-scale reference values for context.
    pub annotations: BTreeMap<String, String>,
    #[serde(skip)]
    pub runtime_s: f64,
}

impl RunRecord {
    /// Sample-weighted mean accuracy recomputed from the per-batch entries.
    pub fn recomputed_accuracy(&self) -> f64 {
        let total: usize = self.batches.iter().map(|b| b.n).sum();
        if total == 0 {
            return 0.0;
        }
        self.batches
            .iter()
            .map(|b| b.accuracy * b.n as f64)
            .sum::<f64>()
            / total as f64
    }

    /// Per-slot (domain) accuracies in slot order, then their unweighted
    /// mean — the domain-uniform aggregate.
    pub fn domain_uniform_accuracy(&self) -> f64 {
        let mut per_slot: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for b in &self.batches {
            let e = per_slot.entry(b.slot_id).or_insert((0.0, 0));
            e.0 += b.accuracy * b.n as f64;
            e.1 += b.n;
        }
        let k = per_slot.len();
        per_slot.values().map(|(a, n)| a / *n as f64).sum::<f64>() / k as f64
    }
}

/// Stable 64-bit FNV-1a over the canonical JSON of any config value, hex
/// encoded; identical configs hash identically across runs and platforms.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("serializable config");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in json.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Write records as line-delimited JSON, one object per line.
pub fn persist_records(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("serializable record");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Load a line-delimited record file, reporting the offending line number
/// on parse failures and rejecting unknown schema versions.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord =
            serde_json::from_str(line).map_err(|e| HarnessError::CorruptRecord {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::SchemaVersionMismatch {
                found: record.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        records.push(record);
    }
    Ok(records)
}
