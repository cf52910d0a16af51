//! SGD with momentum — the single optimizer used framework-wide.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::model::{AdaptiveModel, GradMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Stateful SGD-with-momentum. Momentum buffers are keyed by parameter
/// name and serialize with the run state so online protocols can carry
/// them across batches.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub cfg: OptimizerConfig,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(cfg: OptimizerConfig) -> Self {
        assert!(cfg.learning_rate >= 0.0);
        assert!((0.0..1.0).contains(&cfg.momentum));
        SgdMomentum {
            cfg,
            buffers: BTreeMap::new(),
        }
    }

    /// `v <- mu v + g; theta <- theta - lr v` for each named parameter.
    pub fn step(&mut self, model: &mut AdaptiveModel, grads: &GradMap, names: &[String]) {
        for name in names {
            let Some(g) = grads.get(name) else { continue };
            let p = model.param_mut(name).expect("parameter exists");
            let buf = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                buf[i] = self.cfg.momentum * buf[i] + g[i];
                p[i] -= self.cfg.learning_rate * buf[i];
            }
        }
    }

    pub fn reset_buffers(&mut self) {
        self.buffers.clear();
    }

    pub fn state_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.buffers).expect("buffers serialize")
    }

    pub fn load_state_json(&mut self, v: &serde_json::Value) {
        self.buffers = if v.is_null() {
            BTreeMap::new()
        } else {
            serde_json::from_value(v.clone()).unwrap_or_default()
        };
    }
}
