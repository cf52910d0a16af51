//! Augmentation-driven strategies: auxiliary-task test-time training and
//! per-sample marginal-entropy minimization over augmented copies.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::model::{AdaptiveModel, GradMap, ParamGroup, StatsMode};
use crate::num::softmax_rows;

use super::losses::{loss_and_grads, AuxCrossEntropy, MarginalEntropy};
use super::{MethodError, MethodMeta, SgdMomentum, Strategy};

/// Number of signed-permutation input transforms (the auxiliary task).
pub const N_TRANSFORMS: usize = 4;

/// Apply transform `t` to a flat input row: 0 identity, 1 negation,
/// 2 coordinate reversal, 3 both. Each is an involution.
pub fn apply_transform(row: &[f64], t: usize) -> Vec<f64> {
    let mut out: Vec<f64> = match t {
        0 | 1 => row.to_vec(),
        2 | 3 => row.iter().rev().cloned().collect(),
        _ => panic!("transform index out of range"),
    };
    if t == 1 || t == 3 {
        for v in out.iter_mut() {
            *v = -*v;
        }
    }
    out
}

/// Light input-space augmentation: gaussian jitter plus an optional
/// coordinate sign flip.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSampler {
    pub jitter_sigma: f64,
    pub flip_coord: Option<usize>,
    pub flip_prob: f64,
}

impl Default for AugSampler {
    fn default() -> Self {
        AugSampler {
            jitter_sigma: 0.1,
            flip_coord: None,
            flip_prob: 0.0,
        }
    }
}

impl AugSampler {
    pub fn augment_row(&self, row: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = row.to_vec();
        if self.jitter_sigma > 0.0 {
            let normal = Normal::new(0.0, self.jitter_sigma).unwrap();
            for v in out.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        if let Some(c) = self.flip_coord {
            if self.flip_prob > 0.0 && rng.gen::<f64>() < self.flip_prob {
                out[c] = -out[c];
            }
        }
        out
    }

    /// `n` augmented copies of one row, stacked.
    pub fn augment_many(&self, row: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let d = row.len();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let aug = self.augment_row(row, rng);
            for (j, v) in aug.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }
}

// ----------------------------------------------------------------------- TTT

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TttConfig {}

/// Test-time training: descend the auxiliary transform-classification loss
/// on the shared extractor (and aux head), then predict with the adapted
/// features.
pub struct Ttt {
    _cfg: TttConfig,
}

impl Ttt {
    pub fn new(cfg: TttConfig) -> Self {
        Ttt { _cfg: cfg }
    }

    fn transformed_batch(inputs: &Array2<f64>) -> (Array2<f64>, Vec<usize>) {
        let (b, d) = (inputs.nrows(), inputs.ncols());
        let mut x = Array2::zeros((b * N_TRANSFORMS, d));
        let mut targets = Vec::with_capacity(b * N_TRANSFORMS);
        for i in 0..b {
            let row = inputs.row(i).to_owned();
            let row = row.as_slice().unwrap();
            for t in 0..N_TRANSFORMS {
                let out = apply_transform(row, t);
                for (j, v) in out.into_iter().enumerate() {
                    x[[i * N_TRANSFORMS + t, j]] = v;
                }
                targets.push(t);
            }
        }
        (x, targets)
    }
}

impl Strategy for Ttt {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "ttt",
            resets_model: false,
            requires_norm_stats: false,
            adjusts_pretraining: true,
            updates: &[ParamGroup::Extractor, ParamGroup::Aux],
        }
    }

    fn reset(&mut self, _model: &AdaptiveModel) {}

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        let aux_names = model.group_members(ParamGroup::Aux);
        if aux_names.is_empty() {
            return Err(MethodError::NoAuxHead);
        }
        let (x, targets) = Self::transformed_batch(inputs);
        let obj = AuxCrossEntropy { targets };
        let (_, grads) = loss_and_grads(model, &x, StatsMode::Running, &obj);
        let mut names = model.group_members(ParamGroup::Extractor);
        names.extend(aux_names);
        opt.step(model, &grads, &names);
        Ok(model.probs(inputs, StatsMode::Running))
    }
}

// ---------------------------------------------------------------------- MEMO

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoConfig {
    /// Augmented copies per test sample.
    pub n_aug: usize,
    pub jitter_sigma: f64,
    pub flip_coord: Option<usize>,
    pub flip_prob: f64,
}

impl Default for MemoConfig {
    fn default() -> Self {
        let s = AugSampler::default();
        MemoConfig {
            n_aug: 32,
            jitter_sigma: s.jitter_sigma,
            flip_coord: s.flip_coord,
            flip_prob: s.flip_prob,
        }
    }
}

impl MemoConfig {
    fn sampler(&self) -> AugSampler {
        AugSampler {
            jitter_sigma: self.jitter_sigma,
            flip_coord: self.flip_coord,
            flip_prob: self.flip_prob,
        }
    }
}

/// Marginal-entropy minimization with augmented copies of each sample; one
/// step on all parameters per batch, gradients averaged over samples.
/// Declared episodic: designed to start each batch from the source model.
pub struct Memo {
    cfg: MemoConfig,
}

impl Memo {
    pub fn new(cfg: MemoConfig) -> Self {
        Memo { cfg }
    }
}

impl Strategy for Memo {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "memo",
            resets_model: true,
            requires_norm_stats: false,
            adjusts_pretraining: false,
            updates: &[ParamGroup::All],
        }
    }

    fn reset(&mut self, _model: &AdaptiveModel) {}

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        opt: &mut SgdMomentum,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        if self.cfg.n_aug == 0 {
            return Err(MethodError::InvalidConfig {
                method: "memo".into(),
                reason: "n_aug must be positive".into(),
            });
        }
        let b = inputs.nrows();
        let k = model.class_count;
        let mut preds = Array2::zeros((b, k));
        let mut acc = GradMap::new();
        for i in 0..b {
            let row = inputs.row(i).to_owned();
            let augs = self
                .cfg
                .sampler()
                .augment_many(row.as_slice().unwrap(), self.cfg.n_aug, rng);
            let logits = model.logits(&augs, StatsMode::Running);
            let p = softmax_rows(&logits);
            let marginal = p.mean_axis(Axis(0)).unwrap();
            preds.row_mut(i).assign(&marginal);
            let (_, grads) = loss_and_grads(model, &augs, StatsMode::Running, &MarginalEntropy);
            for (name, g) in grads {
                let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v / b as f64;
                }
            }
        }
        let names = model.group_members(ParamGroup::All);
        opt.step(model, &acc, &names);
        Ok(preds)
    }
}
