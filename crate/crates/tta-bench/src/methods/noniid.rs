//! Strategies built for temporally correlated streams: balanced-reservoir
//! normalization updates and the mean-teacher with stochastic restore.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::model::{AdaptiveModel, ModelState, ParamGroup, StatsMode};
use crate::num::argmax_tie_low;

use super::losses::{loss_and_grads, CrossEntropyFixed, MeanEntropy};
use super::regularizers::stochastic_restore;
use super::{MethodError, MethodMeta, SgdMomentum, Strategy};

// -------------------------------------------------------- balanced reservoir

/// Prediction-balanced reservoir: keeps per-class item counts within one of
/// each other by evicting from the currently largest class.
#[derive(Debug, Clone, serde::Serialize, Deserialize, PartialEq)]
pub struct PbrsBuffer {
    capacity: usize,
    /// `(input row, predicted class)`.
    items: Vec<(Vec<f64>, usize)>,
    /// Per-class arrival counts since construction.
    seen: Vec<u64>,
}

impl PbrsBuffer {
    pub fn new(capacity: usize, class_count: usize) -> Self {
        PbrsBuffer {
            capacity,
            items: Vec::new(),
            seen: vec![0; class_count],
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.seen.len()];
        for (_, y) in &self.items {
            c[*y] += 1;
        }
        c
    }

    pub fn push(&mut self, row: Vec<f64>, class: usize, rng: &mut ChaCha8Rng) {
        self.seen[class] += 1;
        if self.items.len() < self.capacity {
            self.items.push((row, class));
            return;
        }
        let counts = self.counts();
        let max = *counts.iter().max().unwrap();
        if counts[class] >= max {
            // own class is (one of) the largest: plain reservoir inside it
            let stored = counts[class] as f64;
            if rng.gen::<f64>() < stored / self.seen[class] as f64 {
                let own: Vec<usize> = self
                    .items
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, y))| *y == class)
                    .map(|(i, _)| i)
                    .collect();
                let victim = own[rng.gen_range(0..own.len())];
                self.items[victim] = (row, class);
            }
        } else {
            // evict from a strictly larger class to rebalance
            let largest: Vec<usize> = self
                .items
                .iter()
                .enumerate()
                .filter(|(_, (_, y))| counts[*y] == max)
                .map(|(i, _)| i)
                .collect();
            let victim = largest[rng.gen_range(0..largest.len())];
            self.items[victim] = (row, class);
        }
    }

    /// Buffer contents as a batch (insertion order).
    pub fn as_batch(&self, dim: usize) -> Array2<f64> {
        let mut x = Array2::zeros((self.items.len(), dim));
        for (i, (row, _)) in self.items.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        x
    }
}

// ---------------------------------------------------------------------- NOTE

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoteConfig {
    pub buffer_capacity: usize,
    /// Running-statistic blend weight toward the buffer batch.
    pub stats_momentum: f64,
}

impl Default for NoteConfig {
    fn default() -> Self {
        NoteConfig {
            buffer_capacity: 64,
            stats_momentum: 0.1,
        }
    }
}

/// Non-IID-aware adaptation: predictions use running statistics per instance,
/// while updates are computed on a prediction-balanced reservoir so that a
/// temporally correlated stream cannot skew the batch statistics.
pub struct Note {
    cfg: NoteConfig,
    buffer: Option<PbrsBuffer>,
}

impl Note {
    pub fn new(cfg: NoteConfig) -> Self {
        Note { cfg, buffer: None }
    }
}

impl Strategy for Note {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "note",
            resets_model: false,
            requires_norm_stats: true,
            adjusts_pretraining: true,
            updates: &[ParamGroup::BnAffine],
        }
    }

    fn reset(&mut self, model: &AdaptiveModel) {
        self.buffer = Some(PbrsBuffer::new(self.cfg.buffer_capacity, model.class_count));
    }

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        let names = model.group_members(ParamGroup::BnAffine);
        if names.is_empty() {
            return Err(MethodError::NoNormAffine);
        }
        if self.buffer.is_none() {
            self.reset(model);
        }
        // instance-wise inference against running statistics
        let preds = model.probs(inputs, StatsMode::Running);
        let buffer = self.buffer.as_mut().unwrap();
        for (i, row) in inputs.rows().into_iter().enumerate() {
            let p = preds.row(i).to_owned();
            let y = argmax_tie_low(p.as_slice().unwrap());
            buffer.push(row.to_vec(), y, rng);
        }
        let xb = buffer.as_batch(inputs.ncols());
        if xb.nrows() < 2 {
            return Ok(preds);
        }
        // nudge running statistics toward the balanced buffer's batch stats
        let m = self.cfg.stats_momentum;
        if m > 0.0 && model.has_batch_norm() {
            for (layer, mean, var) in model.batch_norm_stats(&xb) {
                let rm = model.param(&format!("{layer}.running_mean")).unwrap().to_vec();
                let rv = model.param(&format!("{layer}.running_var")).unwrap().to_vec();
                let new_m: Vec<f64> = rm
                    .iter()
                    .zip(mean.iter())
                    .map(|(&a, &b)| (1.0 - m) * a + m * b)
                    .collect();
                let new_v: Vec<f64> = rv
                    .iter()
                    .zip(var.iter())
                    .map(|(&a, &b)| (1.0 - m) * a + m * b)
                    .collect();
                model.set_norm_statistics(&layer, &new_m, &new_v).expect("own layer");
            }
        }
        let (_, grads) = loss_and_grads(model, &xb, StatsMode::Running, &MeanEntropy::all());
        opt.step(model, &grads, &names);
        Ok(preds)
    }

    fn state_json(&self) -> serde_json::Value {
        match &self.buffer {
            None => serde_json::Value::Null,
            Some(b) => serde_json::to_value(b).unwrap(),
        }
    }

    fn load_state_json(&mut self, v: &serde_json::Value) -> Result<(), MethodError> {
        if v.is_null() {
            self.buffer = None;
            return Ok(());
        }
        self.buffer =
            Some(
                serde_json::from_value(v.clone()).map_err(|e| MethodError::InvalidConfig {
                    method: "note".into(),
                    reason: e.to_string(),
                })?,
            );
        Ok(())
    }
}

// --------------------------------------------------------------------- CoTTA

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoTtaConfig {
    /// Teacher EMA weight on its previous value.
    pub ema_momentum: f64,
    /// Per-element stochastic restore probability after each step.
    pub restore_prob: f64,
    /// Mean teacher confidence below which augmented views are averaged.
    pub conf_threshold: f64,
    /// Augmented views used for low-confidence batches.
    pub n_aug: usize,
    pub jitter_sigma: f64,
}

impl Default for CoTtaConfig {
    fn default() -> Self {
        CoTtaConfig {
            ema_momentum: 0.99,
            restore_prob: 0.01,
            conf_threshold: 0.7,
            n_aug: 4,
            jitter_sigma: 0.1,
        }
    }
}

/// Continual adaptation with a mean teacher: the student descends
/// cross-entropy toward teacher pseudo-labels, the teacher tracks the
/// student by EMA, and a stochastic restore drifts weights back to the
/// source model.
pub struct CoTta {
    cfg: CoTtaConfig,
    teacher: Option<ModelState>,
    anchor: Option<ModelState>,
}

impl CoTta {
    pub fn new(cfg: CoTtaConfig) -> Self {
        CoTta {
            cfg,
            teacher: None,
            anchor: None,
        }
    }

    fn teacher_preds(
        &self,
        student: &AdaptiveModel,
        inputs: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Array2<f64> {
        let mut teacher = student.clone();
        teacher
            .restore(self.teacher.as_ref().expect("reset before adapt"))
            .expect("teacher state matches architecture");
        let p = teacher.probs(inputs, StatsMode::Running);
        let mean_conf = p
            .rows()
            .into_iter()
            .map(|r| r.iter().cloned().fold(f64::MIN, f64::max))
            .sum::<f64>()
            / p.nrows() as f64;
        if mean_conf >= self.cfg.conf_threshold || self.cfg.n_aug == 0 {
            return p;
        }
        // low confidence: average predictions over jittered views
        let normal = Normal::new(0.0, self.cfg.jitter_sigma).unwrap();
        let mut acc = p;
        for _ in 0..self.cfg.n_aug {
            let aug = inputs.mapv(|v| v) + Array2::from_shape_fn(inputs.raw_dim(), |_| {
                normal.sample(rng)
            });
            acc = acc + teacher.probs(&aug, StatsMode::Running);
        }
        acc / (self.cfg.n_aug as f64 + 1.0)
    }

    fn ema_update(&mut self, student: &AdaptiveModel) {
        let m = self.cfg.ema_momentum;
        let new = student.snapshot();
        let teacher = self.teacher.as_mut().unwrap();
        for (name, tensor) in teacher.parameters.iter_mut() {
            for (t, s) in tensor.data.iter_mut().zip(&new.parameters[name].data) {
                *t = m * *t + (1.0 - m) * s;
            }
        }
        for (name, tensor) in teacher.running_stats.iter_mut() {
            for (t, s) in tensor.data.iter_mut().zip(&new.running_stats[name].data) {
                *t = m * *t + (1.0 - m) * s;
            }
        }
    }
}

impl Strategy for CoTta {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "cotta",
            resets_model: false,
            requires_norm_stats: false,
            adjusts_pretraining: false,
            updates: &[ParamGroup::All],
        }
    }

    fn reset(&mut self, model: &AdaptiveModel) {
        let snap = model.snapshot();
        self.teacher = Some(snap.clone());
        self.anchor = Some(snap);
    }

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        if self.teacher.is_none() {
            self.reset(model);
        }
        let targets = self.teacher_preds(model, inputs, rng);
        let obj = CrossEntropyFixed {
            targets: targets.clone(),
        };
        let (_, grads) = loss_and_grads(model, inputs, StatsMode::Running, &obj);
        let names = model.group_members(ParamGroup::All);
        opt.step(model, &grads, &names);
        self.ema_update(model);
        if self.cfg.restore_prob > 0.0 {
            stochastic_restore(model, self.anchor.as_ref().unwrap(), self.cfg.restore_prob, rng);
        }
        Ok(targets)
    }

    fn predict(&self, model: &AdaptiveModel, inputs: &Array2<f64>) -> Array2<f64> {
        match &self.teacher {
            None => model.probs(inputs, StatsMode::Running),
            Some(state) => {
                let mut teacher = model.clone();
                teacher.restore(state).expect("matching architecture");
                teacher.probs(inputs, StatsMode::Running)
            }
        }
    }

    fn state_json(&self) -> serde_json::Value {
        match &self.teacher {
            None => serde_json::Value::Null,
            Some(t) => serde_json::to_value(t).unwrap(),
        }
    }

    fn load_state_json(&mut self, v: &serde_json::Value) -> Result<(), MethodError> {
        if v.is_null() {
            return Ok(());
        }
        self.teacher =
            Some(
                serde_json::from_value(v.clone()).map_err(|e| MethodError::InvalidConfig {
                    method: "cotta".into(),
                    reason: e.to_string(),
                })?,
            );
        Ok(())
    }
}
