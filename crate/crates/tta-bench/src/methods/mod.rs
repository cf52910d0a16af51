//! Test-time adaptation strategies.
//!
//! All strategies share one interface: `reset` re-initializes method-owned
//! state from the base model, `adapt` performs one unlabeled adaptation
//! step and returns the predictions the method emits for the batch.
//! Strategies never see labels.

pub mod losses;
pub mod noniid;
pub mod norm_family;
pub mod optimizer;
pub mod pseudo_label;
pub mod regularizers;
pub mod self_supervised;

pub use losses::entropy;
pub use noniid::{CoTta, Note, PbrsBuffer};
pub use norm_family::{BnAdapt, ConjugatePl, FisherTent, Sar, Tent};
pub use optimizer::{OptimizerConfig, SgdMomentum};
pub use pseudo_label::{Shot, SupportSet, T3a};
pub use regularizers::{fisher_penalty, fisher_weights, stochastic_restore, FisherState};
pub use self_supervised::{AugSampler, Memo, Ttt};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::model::{AdaptiveModel, ParamGroup, StatsMode};

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("probability vector not normalized (sum = {0})")]
    NotNormalized(f64),
    #[error("model has no batch-norm running statistics")]
    NoNormStats,
    #[error("model has no norm-affine parameters")]
    NoNormAffine,
    #[error("model has no auxiliary head")]
    NoAuxHead,
    #[error("classifier head is not linear")]
    NonLinearHead,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("invalid configuration for `{method}`: {reason}")]
    InvalidConfig { method: String, reason: String },
}

/// Per-method experimental-setting metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodMeta {
    pub name: &'static str,
    /// Whether the method is designed to reset to the base model per batch.
    pub resets_model: bool,
    /// Whether the method mutates batch-norm running statistics.
    pub requires_norm_stats: bool,
    /// Whether the method needs modified pre-training (auxiliary head).
    pub adjusts_pretraining: bool,
    /// Parameter groups the method may update.
    pub updates: &'static [ParamGroup],
}

/// A registered adaptation strategy.
pub trait Strategy {
    fn meta(&self) -> MethodMeta;

    /// Re-initialize method-owned state from the base model.
    fn reset(&mut self, model: &AdaptiveModel);

    /// One adaptation step on an unlabeled batch. Returns the class
    /// probabilities the method emits for this batch.
    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError>;

    /// Prediction with the current state, without adapting.
    fn predict(&self, model: &AdaptiveModel, inputs: &Array2<f64>) -> Array2<f64> {
        model.probs(inputs, StatsMode::Running)
    }

    /// Method-owned auxiliary state, serialized for snapshots.
    fn state_json(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn load_state_json(&mut self, _v: &serde_json::Value) -> Result<(), MethodError> {
        Ok(())
    }
}

/// The registered method names, in roster order.
pub const METHOD_NAMES: [&str; 11] = [
    "bn_adapt",
    "tent",
    "t3a",
    "shot",
    "ttt",
    "memo",
    "note",
    "cotta",
    "conjugate_pl",
    "sar",
    "fisher",
];

fn from_value<'a, T: Deserialize<'a>>(
    method: &str,
    params: &'a serde_json::Value,
) -> Result<T, MethodError> {
    let v = if params.is_null() {
        &serde_json::Value::Object(serde_json::Map::new())
    } else {
        params
    };
    T::deserialize(v.clone()).map_err(|e| MethodError::InvalidConfig {
        method: method.to_string(),
        reason: e.to_string(),
    })
}

/// Build a strategy from its registry name and a JSON hyperparameter
/// object. Unknown keys are rejected.
pub fn build_strategy(
    name: &str,
    params: &serde_json::Value,
) -> Result<Box<dyn Strategy>, MethodError> {
    match name {
        "bn_adapt" => Ok(Box::new(BnAdapt::new(from_value(name, params)?))),
        "tent" => Ok(Box::new(Tent::new(from_value(name, params)?))),
        "t3a" => Ok(Box::new(T3a::new(from_value(name, params)?))),
        "shot" => Ok(Box::new(Shot::new(from_value(name, params)?))),
        "ttt" => Ok(Box::new(Ttt::new(from_value(name, params)?))),
        "memo" => Ok(Box::new(Memo::new(from_value(name, params)?))),
        "note" => Ok(Box::new(Note::new(from_value(name, params)?))),
        "cotta" => Ok(Box::new(CoTta::new(from_value(name, params)?))),
        "conjugate_pl" => Ok(Box::new(ConjugatePl::new(from_value(name, params)?))),
        "sar" => Ok(Box::new(Sar::new(from_value(name, params)?))),
        "fisher" => Ok(Box::new(FisherTent::new(from_value(name, params)?))),
        other => Err(MethodError::UnknownMethod(other.to_string())),
    }
}

/// Look up a method's properties table entry without configuring it.
pub fn method_meta(name: &str) -> Result<MethodMeta, MethodError> {
    Ok(build_strategy(name, &serde_json::Value::Null)?.meta())
}
