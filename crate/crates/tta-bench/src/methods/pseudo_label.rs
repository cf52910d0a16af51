//! Pseudo-label driven strategies: information maximization with centroid
//! pseudo-labels, and the gradient-free prototype adjuster.

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AdaptiveModel, ParamGroup, StatsMode};
use crate::num::{argmax_tie_low, entropy_row, softmax_rows};

use super::losses::{loss_and_grads, InfoMaxPseudo};
use super::{MethodError, MethodMeta, SgdMomentum, Strategy};

// ---------------------------------------------------------------------- SHOT

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotConfig {
    /// Weight of the pseudo-label cross-entropy term.
    pub beta: f64,
    /// Max-probability threshold for a sample to count as confident.
    pub confidence: f64,
}

impl Default for ShotConfig {
    fn default() -> Self {
        ShotConfig {
            beta: 0.3,
            confidence: 0.9,
        }
    }
}

/// Source-hypothesis transfer: freeze the classifier, adapt the extractor
/// with an information-maximization loss plus cross-entropy against
/// centroid-derived pseudo-labels.
pub struct Shot {
    cfg: ShotConfig,
}

impl Shot {
    pub fn new(cfg: ShotConfig) -> Self {
        Shot { cfg }
    }

    /// Soft centroids, one hard reassignment pass, final nearest-centroid
    /// labels. Classes with no probability mass keep their soft centroid.
    pub fn centroid_labels(features: &Array2<f64>, probs: &Array2<f64>) -> Vec<usize> {
        let (b, d) = (features.nrows(), features.ncols());
        let k = probs.ncols();
        let mut centroids: Array2<f64> = Array2::zeros((k, d));
        let mut mass = vec![0.0f64; k];
        for i in 0..b {
            for c in 0..k {
                let p = probs[[i, c]];
                mass[c] += p;
                for j in 0..d {
                    centroids[[c, j]] += p * features[[i, j]];
                }
            }
        }
        for c in 0..k {
            if mass[c] > 0.0 {
                centroids.row_mut(c).mapv_inplace(|v| v / mass[c]);
            }
        }
        let assign = |cent: &Array2<f64>| -> Vec<usize> {
            (0..b)
                .map(|i| {
                    let neg_d2: Vec<f64> = (0..k)
                        .map(|c| {
                            -(0..d)
                                .map(|j| {
                                    let diff = features[[i, j]] - cent[[c, j]];
                                    diff * diff
                                })
                                .sum::<f64>()
                        })
                        .collect();
                    argmax_tie_low(&neg_d2)
                })
                .collect()
        };
        let labels = assign(&centroids);
        // one refinement with hard assignments
        let mut hard = centroids.clone();
        let mut counts = vec![0usize; k];
        let mut sums: Array2<f64> = Array2::zeros((k, d));
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for j in 0..d {
                sums[[y, j]] += features[[i, j]];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    hard[[c, j]] = sums[[c, j]] / counts[c] as f64;
                }
            }
        }
        assign(&hard)
    }
}

impl Strategy for Shot {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "shot",
            resets_model: false,
            requires_norm_stats: false,
            adjusts_pretraining: false,
            updates: &[ParamGroup::Extractor],
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
        let (logits, cache) = model.forward_cached(inputs, StatsMode::Running);
        let probs = softmax_rows(&logits);
        let pseudo = Self::centroid_labels(&cache.embedding, &probs);
        let confident: Vec<bool> = probs
            .rows()
            .into_iter()
            .map(|r| r.iter().cloned().fold(f64::MIN, f64::max) >= self.cfg.confidence)
            .collect();
        let obj = InfoMaxPseudo {
            beta: self.cfg.beta,
            pseudo,
            confident,
        };
        let (_, grads) = loss_and_grads(model, inputs, StatsMode::Running, &obj);
        let names = model.group_members(ParamGroup::Extractor);
        opt.step(model, &grads, &names);
        Ok(probs)
    }
}

// ----------------------------------------------------------------------- T3A

/// Per-class feature supports: a permanent anchor (the classifier weight
/// row) plus a capacity-limited set of low-entropy test features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SupportSet {
    pub anchors: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// `(feature, prediction entropy)` pairs, grouped by class.
    pub stored: Vec<Vec<(Vec<f64>, f64)>>,
    pub capacity: usize,
}

impl SupportSet {
    pub fn from_classifier(model: &AdaptiveModel, capacity: usize) -> Self {
        let k = model.class_count;
        let w = model.param("classifier.weight").expect("linear head");
        let b = model.param("classifier.bias").expect("linear head");
        let dim = w.len() / k;
        let anchors = (0..k).map(|c| w[c * dim..(c + 1) * dim].to_vec()).collect();
        SupportSet {
            anchors,
            bias: b.to_vec(),
            stored: vec![Vec::new(); k],
            capacity,
        }
    }

    pub fn centroid(&self, class: usize) -> Vec<f64> {
        let mut c = self.anchors[class].clone();
        let extra = &self.stored[class];
        if !extra.is_empty() {
            let n = (extra.len() + 1) as f64;
            for (f, _) in extra {
                for (ci, fi) in c.iter_mut().zip(f) {
                    *ci += fi;
                }
            }
            for ci in c.iter_mut() {
                *ci /= n;
            }
        }
        c
    }

    pub fn logits_row(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.anchors.len())
            .map(|c| {
                let cen = self.centroid(c);
                cen.iter().zip(feature).map(|(&a, &b)| a * b).sum::<f64>() + self.bias[c]
            })
            .collect()
    }

    /// Insert a feature under `class`, then drop the highest-entropy entries
    /// beyond capacity.
    pub fn insert(&mut self, class: usize, feature: Vec<f64>, entropy: f64) {
        let slot = &mut self.stored[class];
        slot.push((feature, entropy));
        if slot.len() > self.capacity {
            // stable: among equal entropies, older entries survive
            let (mut worst, mut worst_h) = (0usize, f64::MIN);
            for (i, (_, h)) in slot.iter().enumerate() {
                if *h > worst_h {
                    worst = i;
                    worst_h = *h;
                }
            }
            slot.remove(worst);
        }
    }

    pub fn stored_count(&self) -> usize {
        self.stored.iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T3aConfig {
    /// Per-class support capacity.
    pub capacity: usize,
}

impl Default for T3aConfig {
    fn default() -> Self {
        T3aConfig { capacity: 20 }
    }
}

/// Gradient-free prototype adjustment: classify against class centroids
/// built from the classifier weights plus accumulated low-entropy supports.
/// Never touches the model.
pub struct T3a {
    cfg: T3aConfig,
    supports: Option<SupportSet>,
}

impl T3a {
    pub fn new(cfg: T3aConfig) -> Self {
        T3a {
            cfg,
            supports: None,
        }
    }

    fn supports(&self) -> &SupportSet {
        self.supports.as_ref().expect("reset before use")
    }
}

impl Strategy for T3a {
    fn meta(&self) -> MethodMeta {
        MethodMeta {
            name: "t3a",
            resets_model: false,
            requires_norm_stats: false,
            adjusts_pretraining: false,
            updates: &[],
        }
    }

    fn reset(&mut self, model: &AdaptiveModel) {
        self.supports = Some(SupportSet::from_classifier(model, self.cfg.capacity));
    }

    fn adapt(
        &mut self,
        model: &mut AdaptiveModel,
        inputs: &Array2<f64>,
        _opt: &mut SgdMomentum,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>, MethodError> {
        if self.supports.is_none() {
            self.reset(model);
        }
        let (_, cache) = model.forward_cached(inputs, StatsMode::Running);
        let feats = &cache.embedding;
        let b = feats.nrows();
        let k = model.class_count;
        let mut out = Array2::zeros((b, k));
        let supports = self.supports.as_mut().unwrap();
        for i in 0..b {
            let z = feats.row(i).to_owned();
            let z = z.as_slice().unwrap();
            let logits = supports.logits_row(z);
            let p = softmax_rows(&Array2::from_shape_vec((1, k), logits).unwrap());
            let prow = p.row(0).to_owned();
            let prow = prow.as_slice().unwrap().to_vec();
            let y = argmax_tie_low(&prow);
            let h = entropy_row(&prow);
            supports.insert(y, z.to_vec(), h);
            // prediction from the updated supports
            let logits2 = supports.logits_row(z);
            let p2 = softmax_rows(&Array2::from_shape_vec((1, k), logits2).unwrap());
            out.row_mut(i).assign(&p2.index_axis(Axis(0), 0));
        }
        Ok(out)
    }

    fn predict(&self, model: &AdaptiveModel, inputs: &Array2<f64>) -> Array2<f64> {
        let supports = self.supports();
        let (_, cache) = model.forward_cached(inputs, StatsMode::Running);
        let b = cache.embedding.nrows();
        let k = supports.anchors.len();
        let mut out = Array2::zeros((b, k));
        for i in 0..b {
            let z = cache.embedding.row(i).to_owned();
            let logits = supports.logits_row(z.as_slice().unwrap());
            let p = softmax_rows(&Array2::from_shape_vec((1, k), logits).unwrap());
            out.row_mut(i).assign(&p.index_axis(Axis(0), 0));
        }
        out
    }

    fn state_json(&self) -> serde_json::Value {
        match &self.supports {
            None => serde_json::Value::Null,
            Some(s) => serde_json::to_value(s).unwrap(),
        }
    }

    fn load_state_json(&mut self, v: &serde_json::Value) -> Result<(), MethodError> {
        if v.is_null() {
            self.supports = None;
            return Ok(());
        }
        self.supports =
            Some(
                serde_json::from_value(v.clone()).map_err(|e| MethodError::InvalidConfig {
                    method: "t3a".into(),
                    reason: e.to_string(),
                })?,
            );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::losses::eval_loss;
    use crate::methods::OptimizerConfig;
    use crate::model::NormKind;
    use rand::{Rng, SeedableRng};

    fn toy() -> AdaptiveModel {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        AdaptiveModel::mlp(&mut rng, 6, 8, 2, 3, NormKind::Layer, 1, false)
    }

    fn batch(b: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((b, 6), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn centroid_labels_separable_clusters() {
        // two tight clusters, probs pointing the right way
        let mut f = Array2::zeros((8, 2));
        let mut p = Array2::zeros((8, 2));
        for i in 0..4 {
            f[[i, 0]] = 5.0 + 0.01 * i as f64;
            p[[i, 0]] = 0.8;
            p[[i, 1]] = 0.2;
        }
        for i in 4..8 {
            f[[i, 0]] = -5.0 - 0.01 * i as f64;
            p[[i, 0]] = 0.2;
            p[[i, 1]] = 0.8;
        }
        let labels = Shot::centroid_labels(&f, &p);
        assert_eq!(&labels[..4], &[0, 0, 0, 0]);
        assert_eq!(&labels[4..], &[1, 1, 1, 1]);
    }

    #[test]
    fn shot_keeps_classifier_and_stats_fixed() {
        let mut m = toy();
        let x = batch(24, 1);
        let before = m.snapshot();
        let mut opt = SgdMomentum::new(OptimizerConfig::with_lr(1e-2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut shot = Shot::new(ShotConfig::default());
        shot.adapt(&mut m, &x, &mut opt, &mut rng).unwrap();
        let after = m.snapshot();
        for n in m.group_members(ParamGroup::Classifier) {
            assert_eq!(before.parameters[&n], after.parameters[&n]);
        }
        for n in m.group_members(ParamGroup::BnAffine) {
            assert_eq!(before.parameters[&n], after.parameters[&n]);
        }
        assert_eq!(before.running_stats, after.running_stats);
        // extractor weights did move
        let moved = m
            .group_members(ParamGroup::Extractor)
            .iter()
            .any(|n| before.parameters[n] != after.parameters[n]);
        assert!(moved);
    }

    #[test]
    fn shot_descends_its_objective() {
        let mut m = toy();
        let x = batch(32, 2);
        let (logits, cache) = m.forward_cached(&x, StatsMode::Running);
        let probs = softmax_rows(&logits);
        let pseudo = Shot::centroid_labels(&cache.embedding, &probs);
        let confident = vec![true; 32];
        let obj = InfoMaxPseudo {
            beta: 0.3,
            pseudo,
            confident,
        };
        let before = eval_loss(&m, &x, StatsMode::Running, &obj);
        let mut opt = SgdMomentum::new(OptimizerConfig::with_lr(1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut shot = Shot::new(ShotConfig {
            beta: 0.3,
            confidence: 0.0,
        });
        shot.adapt(&mut m, &x, &mut opt, &mut rng).unwrap();
        let after = eval_loss(&m, &x, StatsMode::Running, &obj);
        assert!(after < before + 1e-9, "{after} vs {before}");
    }

    #[test]
    fn t3a_empty_supports_match_classifier() {
        let mut m = toy();
        let x = batch(16, 3);
        let mut t3a = T3a::new(T3aConfig::default());
        t3a.reset(&m);
        let p = t3a.predict(&m, &x);
        let q = m.probs(&x, StatsMode::Running);
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let _ = &mut m;
    }

    #[test]
    fn t3a_never_mutates_model() {
        let mut m = toy();
        let x = batch(40, 4);
        let before = m.snapshot();
        let mut opt = SgdMomentum::new(OptimizerConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t3a = T3a::new(T3aConfig::default());
        t3a.reset(&m);
        t3a.adapt(&mut m, &x, &mut opt, &mut rng).unwrap();
        assert_eq!(before, m.snapshot());
    }

    #[test]
    fn t3a_capacity_is_enforced() {
        let m = toy();
        let mut t3a = T3a::new(T3aConfig { capacity: 3 });
        t3a.reset(&m);
        let mut opt = SgdMomentum::new(OptimizerConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = m;
        for s in 0..5 {
            let x = batch(20, 100 + s);
            t3a.adapt(&mut model, &x, &mut opt, &mut rng).unwrap();
        }
        let sup = t3a.supports();
        for class in &sup.stored {
            assert!(class.len() <= 3);
        }
        assert!(sup.stored_count() > 0);
    }

    #[test]
    fn t3a_eviction_keeps_low_entropy() {
        let mut s = SupportSet {
            anchors: vec![vec![0.0; 2]; 1],
            bias: vec![0.0],
            stored: vec![Vec::new()],
            capacity: 2,
        };
        s.insert(0, vec![1.0, 0.0], 0.5);
        s.insert(0, vec![0.0, 1.0], 0.1);
        s.insert(0, vec![1.0, 1.0], 0.3);
        let kept: Vec<f64> = s.stored[0].iter().map(|(_, h)| *h).collect();
        assert_eq!(kept, vec![0.1, 0.3]);
    }

    #[test]
    fn t3a_state_roundtrip() {
        let mut m = toy();
        let x = batch(24, 5);
        let mut opt = SgdMomentum::new(OptimizerConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t3a = T3a::new(T3aConfig::default());
        t3a.reset(&m);
        t3a.adapt(&mut m, &x, &mut opt, &mut rng).unwrap();
        let state = t3a.state_json();
        let mut other = T3a::new(T3aConfig::default());
        other.load_state_json(&state).unwrap();
        let probe = batch(8, 6);
        assert_eq!(t3a.predict(&m, &probe), other.predict(&m, &probe));
    }
}
