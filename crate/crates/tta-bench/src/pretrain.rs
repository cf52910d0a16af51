//! Deterministic supervised pretraining for the toy model zoo: a handful of
//! architectures, a ladder of augmentation recipes, per-epoch checkpoints,
//! and classifier fine-tuning under a shifted label distribution.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::methods::losses::{loss_and_grads, AuxCrossEntropy, CrossEntropyFixed};
use crate::methods::self_supervised::{apply_transform, N_TRANSFORMS};
use crate::methods::{OptimizerConfig, SgdMomentum};
use crate::model::{AdaptiveModel, CoreError, ModelState, NormKind, ParamGroup, StatsMode};
use crate::num::accuracy;
use crate::streams::{StreamError, SyntheticTask};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("class {0} has positive target probability but no training examples")]
    EmptyClass(usize),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("unknown augmentation policy `{0}`")]
    UnknownPolicy(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

// -------------------------------------------------------------------- models

/// The architectures in the toy zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyModelSpec {
    MlpBn,
    MlpGn,
    MlpLn,
    SmallConvBn,
}

pub const MODEL_SPECS: [ToyModelSpec; 4] = [
    ToyModelSpec::MlpBn,
    ToyModelSpec::MlpGn,
    ToyModelSpec::MlpLn,
    ToyModelSpec::SmallConvBn,
];

impl ToyModelSpec {
    pub fn parse(s: &str) -> Result<Self, PretrainError> {
        match s {
            "mlp_bn" => Ok(ToyModelSpec::MlpBn),
            "mlp_gn" => Ok(ToyModelSpec::MlpGn),
            "mlp_ln" => Ok(ToyModelSpec::MlpLn),
            "smallconv_bn" => Ok(ToyModelSpec::SmallConvBn),
            other => Err(PretrainError::UnknownArchitecture(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyModelSpec::MlpBn => "mlp_bn",
            ToyModelSpec::MlpGn => "mlp_gn",
            ToyModelSpec::MlpLn => "mlp_ln",
            ToyModelSpec::SmallConvBn => "smallconv_bn",
        }
    }

    pub fn build(
        &self,
        input_dim: usize,
        class_count: usize,
        aux_head: bool,
        seed: u64,
    ) -> AdaptiveModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            ToyModelSpec::MlpBn => {
                AdaptiveModel::mlp(&mut rng, input_dim, 16, 2, class_count, NormKind::Batch, 1, aux_head)
            }
            ToyModelSpec::MlpGn => {
                AdaptiveModel::mlp(&mut rng, input_dim, 16, 2, class_count, NormKind::Group, 4, aux_head)
            }
            ToyModelSpec::MlpLn => {
                AdaptiveModel::mlp(&mut rng, input_dim, 16, 2, class_count, NormKind::Layer, 1, aux_head)
            }
            ToyModelSpec::SmallConvBn => {
                AdaptiveModel::small_conv(&mut rng, input_dim, 4, 16, class_count, aux_head)
            }
        }
    }
}

// -------------------------------------------------------------- augmentation

/// Training-time augmentation recipes, ordered roughly by strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugPolicy {
    None,
    Standard,
    MixupStandard,
    StrongA,
    StrongB,
}

pub const AUG_POLICIES: [AugPolicy; 5] = [
    AugPolicy::None,
    AugPolicy::Standard,
    AugPolicy::MixupStandard,
    AugPolicy::StrongA,
    AugPolicy::StrongB,
];

impl AugPolicy {
    pub fn parse(s: &str) -> Result<Self, PretrainError> {
        match s {
            "none" => Ok(AugPolicy::None),
            "standard" => Ok(AugPolicy::Standard),
            "mixup_standard" => Ok(AugPolicy::MixupStandard),
            "strong_a" => Ok(AugPolicy::StrongA),
            "strong_b" => Ok(AugPolicy::StrongB),
            other => Err(PretrainError::UnknownPolicy(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugPolicy::None => "none",
            AugPolicy::Standard => "standard",
            AugPolicy::MixupStandard => "mixup_standard",
            AugPolicy::StrongA => "strong_a",
            AugPolicy::StrongB => "strong_b",
        }
    }

    fn jitter_sigma(&self) -> f64 {
        match self {
            AugPolicy::None => 0.0,
            AugPolicy::Standard | AugPolicy::MixupStandard | AugPolicy::StrongB => 0.1,
            AugPolicy::StrongA => 0.4,
        }
    }

    fn uses_mixup(&self) -> bool {
        matches!(self, AugPolicy::MixupStandard)
    }

    /// StrongA randomly zeroes one coordinate; StrongB randomly flips the
    /// sign of one coordinate.
    fn apply(
        &self,
        x: &mut Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let sigma = self.jitter_sigma();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).unwrap();
            x.mapv_inplace(|v| v + normal.sample(rng));
        }
        match self {
            AugPolicy::StrongA => {
                for mut row in x.rows_mut() {
                    let j = rng.gen_range(0..row.len());
                    row[j] = 0.0;
                }
            }
            AugPolicy::StrongB => {
                for mut row in x.rows_mut() {
                    if rng.gen::<f64>() < 0.5 {
                        let j = rng.gen_range(0..row.len());
                        row[j] = -row[j];
                    }
                }
            }
            _ => {}
        }
    }
}

/// Convex input/target mixing; `lambda ~ Beta(alpha, alpha)` per pair, each
/// row mixed with a random partner.
pub fn mixup(
    x: &Array2<f64>,
    targets: &Array2<f64>,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let beta = Beta::new(alpha, alpha).expect("positive alpha");
    let b = x.nrows();
    let mut xm = x.clone();
    let mut tm = targets.clone();
    for i in 0..b {
        let j = rng.gen_range(0..b);
        let lam: f64 = beta.sample(rng);
        for c in 0..x.ncols() {
            xm[[i, c]] = lam * x[[i, c]] + (1.0 - lam) * x[[j, c]];
        }
        for c in 0..targets.ncols() {
            tm[[i, c]] = lam * targets[[i, c]] + (1.0 - lam) * targets[[j, c]];
        }
    }
    (xm, tm)
}

// ------------------------------------------------------------------ training

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub learning_rate: f64,
    pub label_smoothing: f64,
    /// Weight of the auxiliary transform-classification loss; only used
    /// when `aux_head` is set.
    pub aux_weight: f64,
    pub aux_head: bool,
    /// EMA weight toward the minibatch when updating running statistics.
    pub stats_momentum: f64,
    pub mixup_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            train_size: 2048,
            val_size: 512,
            learning_rate: 0.05,
            label_smoothing: 0.0,
            aux_weight: 0.3,
            aux_head: false,
            stats_momentum: 0.1,
            mixup_alpha: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub state: ModelState,
}

/// Checkpoints in epoch order, one per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSequence {
    pub architecture: String,
    pub policy: String,
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointSequence {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("non-empty")
    }

    pub fn best(&self) -> &Checkpoint {
        self.checkpoints
            .iter()
            .max_by(|a, b| a.val_accuracy.partial_cmp(&b.val_accuracy).unwrap())
            .expect("non-empty")
    }
}

fn one_hot(labels: &[usize], class_count: usize, smoothing: f64) -> Array2<f64> {
    let off = smoothing / class_count as f64;
    let mut t = Array2::from_elem((labels.len(), class_count), off);
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y]] += 1.0 - smoothing;
    }
    t
}

fn update_running_stats(model: &mut AdaptiveModel, x: &Array2<f64>, momentum: f64) {
    if momentum <= 0.0 || !model.has_batch_norm() {
        return;
    }
    for (layer, mean, var) in model.batch_norm_stats(x) {
        let rm = model.param(&format!("{layer}.running_mean")).unwrap().to_vec();
        let rv = model.param(&format!("{layer}.running_var")).unwrap().to_vec();
        let new_m: Vec<f64> = rm
            .iter()
            .zip(mean.iter())
            .map(|(&a, &b)| (1.0 - momentum) * a + momentum * b)
            .collect();
        let new_v: Vec<f64> = rv
            .iter()
            .zip(var.iter())
            .map(|(&a, &b)| (1.0 - momentum) * a + momentum * b)
            .collect();
        model.set_norm_statistics(&layer, &new_m, &new_v).expect("own layer");
    }
}

fn aux_batch(x: &Array2<f64>, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let (b, d) = (x.nrows(), x.ncols());
    let mut out = Array2::zeros((b, d));
    let mut targets = Vec::with_capacity(b);
    for i in 0..b {
        let t = rng.gen_range(0..N_TRANSFORMS);
        let row = x.row(i).to_owned();
        let tr = apply_transform(row.as_slice().unwrap(), t);
        for (j, v) in tr.into_iter().enumerate() {
            out[[i, j]] = v;
        }
        targets.push(t);
    }
    (out, targets)
}

/// Supervised pretraining on clean task data. Returns the trained model and
/// the per-epoch checkpoint ladder.
pub fn train_base(
    task: &SyntheticTask,
    spec: ToyModelSpec,
    policy: AugPolicy,
    cfg: &TrainConfig,
) -> Result<(AdaptiveModel, CheckpointSequence), PretrainError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.train_size == 0 {
        return Err(PretrainError::InvalidConfig(
            "epochs, batch_size, and train_size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (x_train, y_train) = task.generate(cfg.train_size, None, &mut rng)?;
    let (x_val, y_val) = task.generate(cfg.val_size, None, &mut rng)?;
    let mut model = spec.build(task.input_dim, task.class_count, cfg.aux_head, cfg.seed ^ 0xA5A5);
    let mut opt = SgdMomentum::new(OptimizerConfig::with_lr(cfg.learning_rate));
    let all = model.group_members(ParamGroup::All);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let n = cfg.train_size;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        // Fisher-Yates driven by the training rng keeps runs reproducible
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Array2::zeros((chunk.len(), task.input_dim));
            let mut yb = Vec::with_capacity(chunk.len());
            for (r, &idx) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&x_train.row(idx));
                yb.push(y_train[idx]);
            }
            policy.apply(&mut xb, &mut rng);
            let mut targets = one_hot(&yb, task.class_count, cfg.label_smoothing);
            if policy.uses_mixup() {
                let (xm, tm) = mixup(&xb, &targets, cfg.mixup_alpha, &mut rng);
                xb = xm;
                targets = tm;
            }
            update_running_stats(&mut model, &xb, cfg.stats_momentum);
            let mode = if model.has_batch_norm() {
                StatsMode::Batch
            } else {
                StatsMode::Running
            };
            let (_, mut grads) =
                loss_and_grads(&model, &xb, mode, &CrossEntropyFixed { targets });
            if cfg.aux_head && cfg.aux_weight > 0.0 && model.aux_head.is_some() {
                let (xa, ta) = aux_batch(&xb, &mut rng);
                let (_, aux_grads) =
                    loss_and_grads(&model, &xa, mode, &AuxCrossEntropy { targets: ta });
                for (name, g) in aux_grads {
                    let slot = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += cfg.aux_weight * v;
                    }
                }
            }
            opt.step(&mut model, &grads, &all);
        }
        let val_accuracy = accuracy(&model.probs(&x_val, StatsMode::Running), &y_val);
        checkpoints.push(Checkpoint {
            epoch,
            val_accuracy,
            state: model.snapshot(),
        });
    }
    let seq = CheckpointSequence {
        architecture: spec.name().to_string(),
        policy: policy.name().to_string(),
        checkpoints,
    };
    Ok((model, seq))
}

/// Re-fit the classifier head on data drawn from `label_probs`, extractor
/// frozen. Every class with positive probability must be represented in the
/// drawn sample.
pub fn finetune_classifier(
    source: &AdaptiveModel,
    task: &SyntheticTask,
    label_probs: &[f64],
    cfg: &TrainConfig,
) -> Result<AdaptiveModel, PretrainError> {
    if label_probs.len() != task.class_count {
        return Err(PretrainError::InvalidConfig(format!(
            "label distribution has {} entries for {} classes",
            label_probs.len(),
            task.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0F1E_2D3C);
    let (x, y) = task.generate(cfg.train_size, Some(label_probs), &mut rng)?;
    for (c, &p) in label_probs.iter().enumerate() {
        if p > 0.0 && !y.contains(&c) {
            return Err(PretrainError::EmptyClass(c));
        }
    }
    let mut model = source.clone();
    let mut opt = SgdMomentum::new(OptimizerConfig::with_lr(cfg.learning_rate));
    let head = model.group_members(ParamGroup::Classifier);
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Array2::zeros((chunk.len(), task.input_dim));
            let mut yb = Vec::with_capacity(chunk.len());
            for (r, &idx) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&x.row(idx));
                yb.push(y[idx]);
            }
            let targets = one_hot(&yb, task.class_count, cfg.label_smoothing);
            let (_, grads) = loss_and_grads(
                &model,
                &xb,
                StatsMode::Running,
                &CrossEntropyFixed { targets },
            );
            opt.step(&mut model, &grads, &head);
        }
    }
    Ok(model)
}
