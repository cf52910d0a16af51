//! The normalization-centric method family: batch-statistic adaptation and
//! the entropy-minimization variants that update norm-affine parameters.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::model::{AdaptiveModel, GradMap, ModelState, ParamGroup, StatsMode};
use crate::num::{entropy_row, softmax_rows};

use super::losses::{loss_and_grads, CrossEntropyFixed, MeanEntropy};
use super::regularizers::{fisher_penalty, fisher_weights, stochastic_restore, FisherState};
use super::{MethodError, MethodMeta, SgdMomentum, Strategy};

/// Replace each batch-norm layer's running statistics by the convex
/// combination `(n_source * source + b * batch) / (n_source + b)`.
/// Returns false (and logs) when the model has no batch-norm layers.
fn blend_batch_stats(model: &mut AdaptiveModel, inputs: &Array2<f64>, n_source: f64) -> bool {
    if !model.has_batch_norm() {
        log::warn!("model has no batch-norm layers; statistic adaptation is a no-op");
        return false;
    }
    let stats = model.batch_norm_stats(inputs);
    let b = inputs.nrows() as f64;
    for (layer, batch_mean, batch_var) in stats {
        let rm = model.param(&format!("{layer}.running_mean")).unwrap().to_vec();
        let rv = model.param(&format!("{layer}.running_var")).unwrap().to_vec();
        let w_src = n_source / (n_source + b);
        let w_new = b / (n_source + b);
        let mean: Vec<f64> = rm
            .iter()
            .zip(batch_mean.iter())
            .map(|(&s, &m)| w_src * s + w_new * m)
            .collect();
        let var: Vec<f64> = rv
            .iter()
            .zip(batch_var.iter())
            .map(|(&s, &v)| w_src * s + w_new * v)
            .collect();
        model.set_norm_statistics(&layer, &mean, &var).expect("own layer");
    }
    true
}

// ------------------------------------------------------------------ BN_Adapt

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BnAdaptConfig {
    /// Weight of the source statistics; 0 means pure batch statistics.
    pub n_source: f64,
}

impl Default for BnAdaptConfig {
    fn default() -> Self {
        BnAdaptConfig { n_source: 0.0 }
    }
}

/// Gradient-free adaptation of batch-norm statistics.
pub struct BnAdapt {
    cfg: BnAdaptConfig,
}

impl BnAdapt {
    pub fn new(cfg: BnAdaptConfig) -> Self {
        BnAdapt { cfg }
    }
}

impl Strategy for BnAdapt {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "bn_adapt",
            resets_model: false,
            requires_norm_stats: true,
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
        blend_batch_stats(model, inputs, self.cfg.n_source);
        Ok(model.probs(inputs, StatsMode::Running))
    }
}

// ---------------------------------------------------------- shared machinery

/// Regularizer knobs shared by the gradient-based strategies.
#[derive(Debug, Clone, Default)]
pub struct RegConfig {
    /// Anchor-penalty strength; 0 disables.
    pub fisher_lambda: f64,
    /// Per-element stochastic restore probability; 0 disables.
    pub restore_prob: f64,
}

/// Anchor + lazily computed fisher weights, shared by the family.
#[derive(Default)]
struct RegState {
    anchor: Option<ModelState>,
    fisher: Option<FisherState>,
}

impl RegState {
    fn reset(&mut self, model: &AdaptiveModel) {
        self.anchor = Some(model.snapshot());
        self.fisher = None;
    }

    /// Add the penalty gradient (first batch doubles as calibration data).
    fn apply_penalty(
        &mut self,
        model: &AdaptiveModel,
        inputs: &Array2<f64>,
        cfg: &RegConfig,
        names: &[String],
        grads: &mut GradMap,
    ) -> Result<(), MethodError> {
        if cfg.fisher_lambda <= 0.0 {
            return Ok(());
        }
        if self.fisher.is_none() {
            self.fisher = Some(fisher_weights(model, inputs));
        }
        let anchor = self.anchor.as_ref().expect("reset before adapt");
        fisher_penalty(
            model,
            anchor,
            self.fisher.as_ref().unwrap(),
            cfg.fisher_lambda,
            names,
            grads,
        )?;
        Ok(())
    }

    fn apply_restore(
        &self,
        model: &mut AdaptiveModel,
        cfg: &RegConfig,
        rng: &mut ChaCha8Rng,
    ) {
        if cfg.restore_prob > 0.0 {
            let anchor = self.anchor.as_ref().expect("reset before adapt");
            stochastic_restore(model, anchor, cfg.restore_prob, rng);
        }
    }

    fn state_json(&self) -> serde_json::Value {
        match &self.fisher {
            None => serde_json::Value::Null,
            Some(f) => serde_json::json!({ "fisher": f.weights }),
        }
    }

    fn load_state_json(&mut self, v: &serde_json::Value) {
        self.fisher = v
            .get("fisher")
            .and_then(|w| serde_json::from_value(w.clone()).ok())
            .map(|weights| FisherState { weights });
    }
}

fn norm_affine_names(model: &AdaptiveModel) -> Result<Vec<String>, MethodError> {
    let names = model.group_members(ParamGroup::BnAffine);
    if names.is_empty() {
        return Err(MethodError::NoNormAffine);
    }
    Ok(names)
}

// ---------------------------------------------------------------------- TENT

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TentConfig {
    pub fisher_lambda: f64,
    pub restore_prob: f64,
}

impl TentConfig {
    fn reg(&self) -> RegConfig {
        RegConfig {
            fisher_lambda: self.fisher_lambda,
            restore_prob: self.restore_prob,
        }
    }
}

/// One mean-entropy descent step on the norm-affine parameters, with batch
/// statistics recomputed from the test batch.
pub struct Tent {
    cfg: TentConfig,
    reg: RegState,
}

impl Tent {
    pub fn new(cfg: TentConfig) -> Self {
        Tent {
            cfg,
            reg: RegState::default(),
        }
    }
}

impl Strategy for Tent {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "tent",
            resets_model: false,
            requires_norm_stats: true,
            adjusts_pretraining: false,
            updates: &[ParamGroup::BnAffine],
        }
    }

    fn reset(&mut self, model: &AdaptiveModel) {
        self.reg.reset(model);
    }

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        let names = norm_affine_names(model)?;
        let preds = softmax_rows(&model.logits(inputs, StatsMode::Batch));
        blend_batch_stats(model, inputs, 0.0);
        let (_, mut grads) =
            loss_and_grads(model, inputs, StatsMode::Batch, &MeanEntropy::all());
        self.reg
            .apply_penalty(model, inputs, &self.cfg.reg(), &names, &mut grads)?;
        opt.step(model, &grads, &names);
        self.reg.apply_restore(model, &self.cfg.reg(), rng);
        Ok(preds)
    }

    fn state_json(&self) -> serde_json::Value {
        self.reg.state_json()
    }

    fn load_state_json(&mut self, v: &serde_json::Value) -> Result<(), MethodError> {
        self.reg.load_state_json(v);
        Ok(())
    }
}

// -------------------------------------------------------------- Conjugate PL

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConjugatePlConfig {
    pub temperature: f64,
    pub fisher_lambda: f64,
    pub restore_prob: f64,
}

impl Default for ConjugatePlConfig {
    fn default() -> Self {
        ConjugatePlConfig {
            temperature: 1.0,
            fisher_lambda: 0.0,
            restore_prob: 0.0,
        }
    }
}

impl ConjugatePlConfig {
    fn reg(&self) -> RegConfig {
        RegConfig {
            fisher_lambda: self.fisher_lambda,
            restore_prob: self.restore_prob,
        }
    }
}

/// Self-training toward temperature-scaled soft pseudo-labels, treated as
/// constants; updates norm-affine parameters with batch statistics.
pub struct ConjugatePl {
    cfg: ConjugatePlConfig,
    reg: RegState,
}

impl ConjugatePl {
    pub fn new(cfg: ConjugatePlConfig) -> Self {
        ConjugatePl {
            cfg,
            reg: RegState::default(),
        }
    }
}

impl Strategy for ConjugatePl {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "conjugate_pl",
            resets_model: false,
            requires_norm_stats: true,
            adjusts_pretraining: false,
            updates: &[ParamGroup::BnAffine],
        }
    }

    fn reset(&mut self, model: &AdaptiveModel) {
        self.reg.reset(model);
    }

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        if self.cfg.temperature <= 0.0 {
            return Err(MethodError::InvalidConfig {
                method: "conjugate_pl".into(),
                reason: "temperature must be positive".into(),
            });
        }
        let names = norm_affine_names(model)?;
        let logits = model.logits(inputs, StatsMode::Batch);
        let preds = softmax_rows(&logits);
        let targets = softmax_rows(&logits.mapv(|v| v / self.cfg.temperature));
        blend_batch_stats(model, inputs, 0.0);
        let (_, mut grads) = loss_and_grads(
            model,
            inputs,
            StatsMode::Batch,
            &CrossEntropyFixed { targets },
        );
        self.reg
            .apply_penalty(model, inputs, &self.cfg.reg(), &names, &mut grads)?;
        opt.step(model, &grads, &names);
        self.reg.apply_restore(model, &self.cfg.reg(), rng);
        Ok(preds)
    }

    fn state_json(&self) -> serde_json::Value {
        self.reg.state_json()
    }

    fn load_state_json(&mut self, v: &serde_json::Value) -> Result<(), MethodError> {
        self.reg.load_state_json(v);
        Ok(())
    }
}

// ----------------------------------------------------------------------- SAR

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SarConfig {
    /// Sharpness-probe radius.
    pub rho: f64,
    /// Entropy filter threshold as a fraction of `ln C`.
    pub entropy_factor: f64,
    pub fisher_lambda: f64,
    pub restore_prob: f64,
}

impl Default for SarConfig {
    fn default() -> Self {
        SarConfig {
            rho: 0.05,
            entropy_factor: 0.4,
            fisher_lambda: 0.0,
            restore_prob: 0.0,
        }
    }
}

impl SarConfig {
    fn reg(&self) -> RegConfig {
        RegConfig {
            fisher_lambda: self.fisher_lambda,
            restore_prob: self.restore_prob,
        }
    }
}

/// Sharpness-aware entropy minimization on norm-affine parameters with a
/// low-entropy sample filter. Uses running statistics (GN/LN friendly).
pub struct Sar {
    cfg: SarConfig,
    reg: RegState,
}

impl Sar {
    pub fn new(cfg: SarConfig) -> Self {
        Sar {
            cfg,
            reg: RegState::default(),
        }
    }

    fn grad_norm(grads: &GradMap, names: &[String]) -> f64 {
        names
            .iter()
            .filter_map(|n| grads.get(n))
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl Strategy for Sar {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "sar",
            resets_model: true,
            requires_norm_stats: false,
            adjusts_pretraining: false,
            updates: &[ParamGroup::BnAffine],
        }
    }

    fn reset(&mut self, model: &AdaptiveModel) {
        self.reg.reset(model);
    }

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        let names = norm_affine_names(model)?;
        let preds = model.probs(inputs, StatsMode::Running);
        let e0 = self.cfg.entropy_factor * (model.class_count as f64).ln();
        let mask: Vec<bool> = preds
            .rows()
            .into_iter()
            .map(|r| entropy_row(r.as_slice().unwrap()) < e0)
            .collect();
        if !mask.iter().any(|&m| m) {
            return Ok(preds);
        }
        let obj = MeanEntropy { mask: Some(mask) };
        let (_, grads) = loss_and_grads(model, inputs, StatsMode::Running, &obj);
        let norm = Self::grad_norm(&grads, &names);
        let mut final_grads = if norm > 0.0 && self.cfg.rho > 0.0 {
            // probe the sharpness direction: theta + rho * g / |g|
            let scale = self.cfg.rho / norm;
            for n in &names {
                if let Some(g) = grads.get(n) {
                    let p = model.param_mut(n).unwrap();
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi += scale * gi;
                    }
                }
            }
            let (_, probe_grads) = loss_and_grads(model, inputs, StatsMode::Running, &obj);
            for n in &names {
                if let Some(g) = grads.get(n) {
                    let p = model.param_mut(n).unwrap();
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= scale * gi;
                    }
                }
            }
            probe_grads
        } else {
            grads
        };
        self.reg
            .apply_penalty(model, inputs, &self.cfg.reg(), &names, &mut final_grads)?;
        opt.step(model, &final_grads, &names);
        self.reg.apply_restore(model, &self.cfg.reg(), rng);
        Ok(preds)
    }

    fn state_json(&self) -> serde_json::Value {
        self.reg.state_json()
    }

    fn load_state_json(&mut self, v: &serde_json::Value) -> Result<(), MethodError> {
        self.reg.load_state_json(v);
        Ok(())
    }
}

// ------------------------------------------------------------ Fisher variant

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherTentConfig {
    pub fisher_lambda: f64,
    pub restore_prob: f64,
}

impl Default for FisherTentConfig {
    fn default() -> Self {
        FisherTentConfig {
            fisher_lambda: 1.0,
            restore_prob: 0.0,
        }
    }
}

/// Entropy minimization with the squared-gradient anchor penalty enabled by
/// default — the regularized roster entry.
pub struct FisherTent {
    inner: Tent,
}

impl FisherTent {
    pub fn new(cfg: FisherTentConfig) -> Self {
        FisherTent {
            inner: Tent::new(TentConfig {
                fisher_lambda: cfg.fisher_lambda,
                restore_prob: cfg.restore_prob,
            }),
        }
    }
}

impl Strategy for FisherTent {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "fisher",
            resets_model: false,
            requires_norm_stats: true,
            adjusts_pretraining: false,
            updates: &[ParamGroup::BnAffine],
        }
    }

    fn reset(&mut self, model: &AdaptiveModel) {
        self.inner.reset(model);
    }

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        self.inner.adapt(model, inputs, opt, rng)
    }

    fn state_json(&self) -> serde_json::Value {
        self.inner.state_json()
    }

    fn load_state_json(&mut self, v: &serde_json::Value) -> Result<(), MethodError> {
        self.inner.load_state_json(v)
    }
}
