//! Synthetic shifted test streams.
//!
//! A stream is a concatenation of time slots; each slot draws labeled
//! examples from a synthetic task under a slot-level sampler (i.i.d.,
//! Dirichlet label-skewed, or class-ordered) and applies an optional
//! corruption. Everything is deterministic in the stream seed.

use ndarray::{Array1, Array2};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid alpha {0}: must be > 0")]
    InvalidAlpha(f64),
    #[error("unknown corruption `{0}`")]
    UnknownCorruption(String),
    #[error("invalid correlation {0}: must lie in [-1, 1]")]
    InvalidCorrelation(f64),
    #[error("attribute probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("attribute cell `{0}` has no data")]
    EmptyCell(String),
    #[error("slot {slot} requests {requested} examples but only {available} are available")]
    ExhaustedSlot {
        slot: usize,
        requested: usize,
        available: usize,
    },
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
}

// ------------------------------------------------------------------ attributes

/// A finite attribute space with an explicit joint probability table.
#[derive(Debug, Clone)]
pub struct AttributeSpace {
    pub names: Vec<String>,
    /// Value counts per attribute.
    pub cardinalities: Vec<usize>,
    /// Joint probabilities in row-major order over the value grid.
    pub joint: Vec<f64>,
}

impl AttributeSpace {
    pub fn new(
        names: Vec<String>,
        cardinalities: Vec<usize>,
        joint: Vec<f64>,
    ) -> Result<Self, StreamError> {
        let cells: usize = cardinalities.iter().product();
        if joint.len() != cells {
            return Err(StreamError::InvalidSpec(format!(
                "joint table has {} entries, expected {}",
                joint.len(),
                cells
            )));
        }
        if joint.iter().any(|&p| p < 0.0) {
            return Err(StreamError::InvalidSpec("negative probability".into()));
        }
        let sum: f64 = joint.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(StreamError::NotNormalized(sum));
        }
        Ok(AttributeSpace {
            names,
            cardinalities,
            joint,
        })
    }

    /// Sample one cell (attribute-value tuple) from the joint table.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.joint.len() - 1;
        for (i, &p) in self.joint.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = i;
                break;
            }
        }
        // unflatten
        let mut values = vec![0; self.cardinalities.len()];
        for (k, &card) in self.cardinalities.iter().enumerate().rev() {
            values[k] = idx % card;
            idx /= card;
        }
        values
    }
}

// ----------------------------------------------------------------- corruptions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    Blur,
    Contrast,
    PixelateAnalogue,
}

impl Corruption {
    pub fn parse(s: &str) -> Result<Self, StreamError> {
        match s {
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "blur" => Ok(Self::Blur),
            "contrast" => Ok(Self::Contrast),
            "pixelate_analogue" => Ok(Self::PixelateAnalogue),
            other => Err(StreamError::UnknownCorruption(other.to_string())),
        }
    }
}

/// Interpolation weight per severity level; level 0 is the identity.
const SEVERITY_T: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
/// Gaussian-noise sigma per severity level.
const NOISE_SIGMA: [f64; 6] = [0.0, 0.15, 0.3, 0.5, 0.8, 1.2];

/// Apply a corruption at an integer severity in `0..=5`. Severity 0 returns
/// the input unchanged; perturbation strength is nondecreasing in severity.
pub fn apply_corruption(
    x: &Array2<f64>,
    kind: Corruption,
    severity: u8,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, StreamError> {
    if severity > 5 {
        return Err(StreamError::InvalidSpec(format!(
            "severity {severity} out of range 0..=5"
        )));
    }
    if severity == 0 {
        return Ok(x.clone());
    }
    let t = SEVERITY_T[severity as usize];
    let mut out = x.clone();
    match kind {
        Corruption::GaussianNoise => {
            let sigma = NOISE_SIGMA[severity as usize];
            for v in out.iter_mut() {
                *v += sigma * gauss(rng);
            }
        }
        Corruption::Blur => {
            // window-3 moving average, blended by severity
            for mut row in out.rows_mut() {
                let orig: Vec<f64> = row.to_vec();
                let n = orig.len();
                for i in 0..n {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 1).min(n - 1);
                    let avg =
                        (lo..=hi).map(|j| orig[j]).sum::<f64>() / (hi - lo + 1) as f64;
                    row[i] = (1.0 - t) * orig[i] + t * avg;
                }
            }
        }
        Corruption::Contrast => {
            // pull every row toward its mean
            for mut row in out.rows_mut() {
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                for v in row.iter_mut() {
                    *v = (1.0 - t) * *v + t * mean;
                }
            }
        }
        Corruption::PixelateAnalogue => {
            // block-average neighbouring coordinates, blended by severity
            let block = [1usize, 2, 2, 3, 4, 6][severity as usize];
            for mut row in out.rows_mut() {
                let orig: Vec<f64> = row.to_vec();
                let n = orig.len();
                let mut i = 0;
                while i < n {
                    let end = (i + block).min(n);
                    let avg = orig[i..end].iter().sum::<f64>() / (end - i) as f64;
                    for j in i..end {
                        row[j] = (1.0 - t) * orig[j] + t * avg;
                    }
                    i = end;
                }
            }
        }
    }
    Ok(out)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ------------------------------------------------------------------- dirichlet

/// Per-slot class proportions sampled from `Dir(alpha * 1_C)`.
///
/// Sampling happens in log space via the `Gamma(a) = Gamma(a+1) * U^{1/a}`
/// boost, so tiny alphas do not underflow to all-zero vectors.
pub fn dirichlet_label_slots(
    alpha: f64,
    class_count: usize,
    n_slots: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, StreamError> {
    if !(alpha > 0.0) {
        return Err(StreamError::InvalidAlpha(alpha));
    }
    assert!(class_count >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma");
    let mut slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let mut logs = Vec::with_capacity(class_count);
        for _ in 0..class_count {
            let g: f64 = gamma.sample(&mut rng);
            let u: f64 = rng.gen::<f64>().max(1e-300);
            logs.push(g.max(1e-300).ln() + u.ln() / alpha);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        slots.push(probs);
    }
    Ok(slots)
}

// ----------------------------------------------------------------- toy task

/// Generator for labeled vector examples with controllable attributes:
/// class-mean clusters, a style coordinate correlated with the label, an
/// optional corruption, and an additive covariate mean shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub class_count: usize,
    pub input_dim: usize,
    /// Scale of the class-mean separation.
    pub class_sep: f64,
    pub noise_sigma: f64,
    /// Coordinate carrying the style attribute.
    pub style_coord: usize,
    pub style_strength: f64,
    /// Correlation between style sign and label parity; agreement
    /// probability is `(1 + rho) / 2`.
    pub rho: f64,
    /// Probability of flipping a label to a random other class.
    pub label_noise: f64,
    pub corruption: Option<(Corruption, u8)>,
    /// Additive shift applied to every coordinate (covariate shift knob).
    pub mean_shift: f64,
    /// Finite per-class example pool for without-replacement sampling;
    /// `None` means an unbounded generator.
    pub pool_per_class: Option<usize>,
    /// Determines the class means.
    pub seed: u64,
}

impl SyntheticTask {
    pub fn new(class_count: usize, input_dim: usize, seed: u64) -> Self {
        SyntheticTask {
            class_count,
            input_dim,
            class_sep: 1.8,
            noise_sigma: 0.6,
            style_coord: input_dim - 1,
            style_strength: 1.0,
            rho: 0.0,
            label_noise: 0.0,
            corruption: None,
            mean_shift: 0.0,
            pool_per_class: None,
            seed,
        }
    }

    /// Class means, fixed by the task seed.
    pub fn class_means(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
        Array2::from_shape_fn((self.class_count, self.input_dim), |_| {
            gauss(&mut rng) * self.class_sep
        })
    }

    /// Whether the style sign agrees with the label for this draw.
    fn style_sign(&self, label: usize, rng: &mut ChaCha8Rng) -> f64 {
        let agree = rng.gen::<f64>() < (1.0 + self.rho) / 2.0;
        let label_sign = if label % 2 == 0 { 1.0 } else { -1.0 };
        if agree {
            label_sign
        } else {
            -label_sign
        }
    }

    /// One clean example for `label` (before corruption / mean shift).
    fn sample_clean(&self, means: &Array2<f64>, label: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let mut x = Array1::zeros(self.input_dim);
        for j in 0..self.input_dim {
            x[j] = means[[label, j]] + self.noise_sigma * gauss(rng);
        }
        x[self.style_coord] = self.style_strength * self.style_sign(label, rng);
        x
    }

    /// Generate `n` labeled examples with labels drawn from `label_probs`
    /// (uniform when `None`). Applies label noise, mean shift, and the
    /// task-level corruption.
    pub fn generate(
        &self,
        n: usize,
        label_probs: Option<&[f64]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, Vec<usize>), StreamError> {
        let means = self.class_means();
        let mut xs = Array2::zeros((n, self.input_dim));
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let mut y = match label_probs {
                None => rng.gen_range(0..self.class_count),
                Some(p) => sample_categorical(p, rng),
            };
            let x = self.sample_clean(&means, y, rng);
            if self.label_noise > 0.0 && rng.gen::<f64>() < self.label_noise {
                let shift = rng.gen_range(1..self.class_count);
                y = (y + shift) % self.class_count;
            }
            for j in 0..self.input_dim {
                xs[[i, j]] = x[j] + self.mean_shift;
            }
            ys.push(y);
        }
        if let Some((kind, sev)) = self.corruption {
            xs = apply_corruption(&xs, kind, sev, rng)?;
        }
        Ok((xs, ys))
    }

    /// The (label, style) attribute space induced by this task.
    pub fn attribute_space(&self) -> AttributeSpace {
        let c = self.class_count as f64;
        let agree = (1.0 + self.rho) / 2.0;
        let mut joint = Vec::with_capacity(self.class_count * 2);
        for label in 0..self.class_count {
            // style index 0 = +, 1 = -
            let label_sign_pos = label % 2 == 0;
            let p_pos = if label_sign_pos { agree } else { 1.0 - agree };
            joint.push(p_pos / c);
            joint.push((1.0 - p_pos) / c);
        }
        AttributeSpace::new(
            vec!["label".into(), "style".into()],
            vec![self.class_count, 2],
            joint,
        )
        .expect("task-induced table is normalized")
    }
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Train/test task pair differing only in the style/label correlation
/// (attribute-relationship shift): train uses `rho_train`, test `rho_test`.
pub fn spurious_task(
    base: &SyntheticTask,
    rho_train: f64,
    rho_test: f64,
    label_noise: f64,
) -> Result<(SyntheticTask, SyntheticTask), StreamError> {
    for rho in [rho_train, rho_test] {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(StreamError::InvalidCorrelation(rho));
        }
    }
    if !(0.0..=0.5).contains(&label_noise) {
        return Err(StreamError::InvalidSpec(format!(
            "label_noise {label_noise} outside [0, 0.5]"
        )));
    }
    let mut train = base.clone();
    train.rho = rho_train;
    train.label_noise = label_noise;
    let mut test = base.clone();
    test.rho = rho_test;
    test.label_noise = label_noise;
    Ok((train, test))
}

// ------------------------------------------------------------------- streams

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    Iid,
    DirichletLabel { alpha: f64 },
    ClassOrdered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    AttributeRelationship,
    AttributeValues,
    Label,
    Nonstationary,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    /// Number of sampling trials for this slot.
    pub n_trials: usize,
    pub sampler: SamplerKind,
    /// Per-slot corruption override (enables non-stationary concatenations).
    #[serde(default)]
    pub corruption: Option<(Corruption, u8)>,
    /// Per-slot additive covariate shift override.
    #[serde(default)]
    pub mean_shift: Option<f64>,
}

/// Declarative description of a shifted test stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub slots: Vec<SlotSpec>,
    pub batch_size: usize,
    pub seed: u64,
    pub shift_kind: ShiftKind,
    /// Error instead of warn when a finite pool is exhausted.
    #[serde(default)]
    pub strict_pools: bool,
}

impl StreamSpec {
    /// A single-slot i.i.d. stream.
    pub fn iid(n_batches: usize, batch_size: usize, seed: u64) -> Self {
        StreamSpec {
            slots: vec![SlotSpec {
                n_trials: n_batches * batch_size,
                sampler: SamplerKind::Iid,
                corruption: None,
                mean_shift: None,
            }],
            batch_size,
            seed,
            shift_kind: ShiftKind::None,
        strict_pools: false,
        }
    }

    /// One Dirichlet-skewed slot per batch, `n_slots` slots total.
    pub fn dirichlet(alpha: f64, n_slots: usize, batch_size: usize, seed: u64) -> Self {
        StreamSpec {
            slots: (0..n_slots)
                .map(|_| SlotSpec {
                    n_trials: batch_size,
                    sampler: SamplerKind::DirichletLabel { alpha },
                    corruption: None,
                    mean_shift: None,
                })
                .collect(),
            batch_size,
            seed,
            shift_kind: ShiftKind::Label,
            strict_pools: false,
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if self.batch_size == 0 {
            return Err(StreamError::InvalidSpec("batch_size must be positive".into()));
        }
        if !self.slots.iter().any(|s| s.n_trials >= self.batch_size) {
            return Err(StreamError::InvalidSpec(
                "no slot yields at least one batch".into(),
            ));
        }
        Ok(())
    }
}

/// One timestep's labeled batch. Labels are consumed only by oracle
/// selection and metrics, never handed to adaptation methods.
#[derive(Debug, Clone)]
pub struct TestBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub slot_id: usize,
    pub batch_index: usize,
}

/// Materialize a stream: batches appear in slot order, each slot's
/// composition follows its sampler. Sampling is without replacement from
/// the task's finite per-class pools when configured, falling back to
/// with-replacement with a logged warning (or an error in strict mode).
pub fn build_stream(spec: &StreamSpec, task: &SyntheticTask) -> Result<Vec<TestBatch>, StreamError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = task.class_means();

    // Finite per-class pools, shared across slots.
    let mut pools: Option<Vec<Vec<Array1<f64>>>> = match task.pool_per_class {
        None => None,
        Some(0) => {
            return Err(StreamError::EmptyCell("per-class pool is empty".into()));
        }
        Some(n) => {
            let mut pool_rng =
                ChaCha8Rng::seed_from_u64(task.seed.wrapping_add(0xA5A5_5A5A));
            Some(
                (0..task.class_count)
                    .map(|c| {
                        (0..n)
                            .map(|_| task.sample_clean(&means, c, &mut pool_rng))
                            .collect()
                    })
                    .collect(),
            )
        }
    };
    let mut exhausted_warned = false;

    let mut batches = Vec::new();
    let mut batch_index = 0;
    for (slot_id, slot) in spec.slots.iter().enumerate() {
        let probs: Option<Vec<f64>> = match &slot.sampler {
            SamplerKind::Iid | SamplerKind::ClassOrdered => None,
            SamplerKind::DirichletLabel { alpha } => {
                if !(*alpha > 0.0) {
                    return Err(StreamError::InvalidAlpha(*alpha));
                }
                let slot_seed = rng.gen::<u64>();
                Some(dirichlet_label_slots(*alpha, task.class_count, 1, slot_seed)?.remove(0))
            }
        };
        let n_batches = slot.n_trials / spec.batch_size;
        // Draw all slot labels up front so class-ordered slots can sort.
        let total = n_batches * spec.batch_size;
        let mut labels: Vec<usize> = (0..total)
            .map(|_| match &probs {
                None => rng.gen_range(0..task.class_count),
                Some(p) => sample_categorical(p, &mut rng),
            })
            .collect();
        if slot.sampler == SamplerKind::ClassOrdered {
            labels.sort_unstable();
        }

        for b in 0..n_batches {
            let batch_labels = &labels[b * spec.batch_size..(b + 1) * spec.batch_size];
            let mut inputs = Array2::zeros((spec.batch_size, task.input_dim));
            let mut out_labels = Vec::with_capacity(spec.batch_size);
            for (row, &y) in batch_labels.iter().enumerate() {
                let x = match &mut pools {
                    None => task.sample_clean(&means, y, &mut rng),
                    Some(pools) => {
                        let pool = &mut pools[y];
                        if pool.is_empty() {
                            if spec.strict_pools {
                                return Err(StreamError::ExhaustedSlot {
                                    slot: slot_id,
                                    requested: slot.n_trials,
                                    available: 0,
                                });
                            }
                            if !exhausted_warned {
                                log::warn!(
                                    "class {y} pool exhausted in slot {slot_id}; falling back to with-replacement sampling"
                                );
                                exhausted_warned = true;
                            }
                            task.sample_clean(&means, y, &mut rng)
                        } else {
                            let idx = rng.gen_range(0..pool.len());
                            pool.swap_remove(idx)
                        }
                    }
                };
                let mut y_out = y;
                if task.label_noise > 0.0 && rng.gen::<f64>() < task.label_noise {
                    let shift = rng.gen_range(1..task.class_count);
                    y_out = (y + shift) % task.class_count;
                }
                let shift = slot.mean_shift.unwrap_or(task.mean_shift);
                for j in 0..task.input_dim {
                    inputs[[row, j]] = x[j] + shift;
                }
                out_labels.push(y_out);
            }
            let corruption = slot.corruption.or(task.corruption);
            if let Some((kind, sev)) = corruption {
                inputs = apply_corruption(&inputs, kind, sev, &mut rng)?;
            }
            batches.push(TestBatch {
                inputs,
                labels: out_labels,
                slot_id,
                batch_index,
            });
            batch_index += 1;
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirichlet_uniform_limit() {
        let slots = dirichlet_label_slots(1e6, 10, 100, 42).unwrap();
        let mut max_dev: f64 = 0.0;
        for s in &slots {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for &p in s {
                max_dev = max_dev.max((p - 0.1).abs());
            }
        }
        assert!(max_dev < 0.01, "max deviation {max_dev}");
    }

    #[test]
    fn dirichlet_severe_shift_at_tiny_alpha() {
        let slots = dirichlet_label_slots(0.01, 10, 200, 7).unwrap();
        let mean_max: f64 = slots
            .iter()
            .map(|s| s.iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / slots.len() as f64;
        assert!(mean_max > 0.9, "mean max proportion {mean_max}");
    }

    #[test]
    fn dirichlet_deterministic_in_seed() {
        let a = dirichlet_label_slots(0.5, 6, 20, 99).unwrap();
        let b = dirichlet_label_slots(0.5, 6, 20, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dirichlet_rejects_nonpositive_alpha() {
        assert!(matches!(
            dirichlet_label_slots(0.0, 4, 1, 0),
            Err(StreamError::InvalidAlpha(_))
        ));
    }

    /// Expected TV distance from uniform decreases as alpha grows.
    #[test]
    fn dirichlet_severity_monotone_in_alpha() {
        let c = 10;
        let uniform = 1.0 / c as f64;
        let mut means = Vec::new();
        for &alpha in &[0.01, 0.1, 1.0, 10.0] {
            let slots = dirichlet_label_slots(alpha, c, 200, 5).unwrap();
            let tv: f64 = slots
                .iter()
                .map(|s| 0.5 * s.iter().map(|p| (p - uniform).abs()).sum::<f64>())
                .sum::<f64>()
                / slots.len() as f64;
            means.push(tv);
        }
        for w in means.windows(2) {
            assert!(w[0] > w[1], "TV means not strictly decreasing: {means:?}");
        }
    }

    #[test]
    fn corruption_severity_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((4, 8), |_| rng.gen::<f64>());
        for kind in [
            Corruption::GaussianNoise,
            Corruption::Blur,
            Corruption::Contrast,
            Corruption::PixelateAnalogue,
        ] {
            let y = apply_corruption(&x, kind, 0, &mut rng).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corruption_strength_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((64, 16), |_| rng.gen::<f64>() * 2.0 - 1.0);
        for kind in [
            Corruption::GaussianNoise,
            Corruption::Blur,
            Corruption::Contrast,
            Corruption::PixelateAnalogue,
        ] {
            let mut prev = -1.0;
            for sev in 0..=5u8 {
                let y = apply_corruption(&x, kind, sev, &mut rng).unwrap();
                let l2 = (&y - &x).mapv(|v| v * v).sum().sqrt() / x.len() as f64;
                assert!(
                    l2 >= prev - 1e-12,
                    "{kind:?} severity {sev}: perturbation {l2} < {prev}"
                );
                prev = l2;
            }
        }
    }

    #[test]
    fn unknown_corruption_rejected() {
        assert!(matches!(
            Corruption::parse("fog2"),
            Err(StreamError::UnknownCorruption(_))
        ));
    }

    #[test]
    fn iid_slot_label_histogram_near_uniform() {
        let task = SyntheticTask::new(4, 8, 3);
        let spec = StreamSpec::iid(50, 64, 11);
        let batches = build_stream(&spec, &task).unwrap();
        let n: usize = batches.iter().map(|b| b.labels.len()).sum();
        let mut counts = vec![0usize; 4];
        for b in &batches {
            for &y in &b.labels {
                counts[y] += 1;
            }
        }
        // 3 sigma of a uniform multinomial cell
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "count {c} outside 3 sigma of {}",
                n as f64 * p
            );
        }
    }

    #[test]
    fn class_ordered_slot_is_sorted() {
        let task = SyntheticTask::new(5, 8, 3);
        let spec = StreamSpec {
            slots: vec![SlotSpec {
                n_trials: 320,
                sampler: SamplerKind::ClassOrdered,
                corruption: None,
                mean_shift: None,
            }],
            batch_size: 32,
            seed: 4,
            shift_kind: ShiftKind::Nonstationary,
            strict_pools: false,
        };
        let batches = build_stream(&spec, &task).unwrap();
        let labels: Vec<usize> = batches.iter().flat_map(|b| b.labels.clone()).collect();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(labels, sorted);
    }

    #[test]
    fn stream_deterministic_in_seed() {
        let task = SyntheticTask::new(4, 8, 3);
        let spec = StreamSpec::dirichlet(0.5, 10, 16, 21);
        let a = build_stream(&spec, &task).unwrap();
        let b = build_stream(&spec, &task).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.inputs, y.inputs);
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn strict_pool_exhaustion_errors() {
        let mut task = SyntheticTask::new(4, 8, 3);
        task.pool_per_class = Some(5);
        let mut spec = StreamSpec::iid(10, 16, 2);
        spec.strict_pools = true;
        assert!(matches!(
            build_stream(&spec, &task),
            Err(StreamError::ExhaustedSlot { .. })
        ));
    }

    #[test]
    fn spurious_agreement_matches_rho() {
        let base = SyntheticTask::new(2, 8, 13);
        let (train, _) = spurious_task(&base, 0.8, -0.8, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (xs, ys) = train.generate(10_000, None, &mut rng).unwrap();
        let agree = ys
            .iter()
            .enumerate()
            .filter(|(i, &y)| {
                let sign = xs[[*i, train.style_coord]] > 0.0;
                sign == (y % 2 == 0)
            })
            .count() as f64
            / ys.len() as f64;
        assert!((agree - 0.9).abs() < 0.02, "agreement {agree}");
    }

    #[test]
    fn spurious_rejects_bad_correlation() {
        let base = SyntheticTask::new(2, 8, 13);
        assert!(matches!(
            spurious_task(&base, 1.5, 0.0, 0.0),
            Err(StreamError::InvalidCorrelation(_))
        ));
    }

    #[test]
    fn style_only_classifier_flips_with_rho() {
        // a classifier reading only the style coordinate has test accuracy
        // 1 - train accuracy when rho_test = -rho_train (no label noise)
        let base = SyntheticTask::new(2, 8, 13);
        let (train, test) = spurious_task(&base, 0.6, -0.6, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let style_acc = |task: &SyntheticTask, rng: &mut ChaCha8Rng| {
            let (xs, ys) = task.generate(20_000, None, rng).unwrap();
            ys.iter()
                .enumerate()
                .filter(|(i, &y)| {
                    let pred = if xs[[*i, task.style_coord]] > 0.0 { 0 } else { 1 };
                    pred == y % 2
                })
                .count() as f64
                / ys.len() as f64
        };
        let a_train = style_acc(&train, &mut rng);
        let a_test = style_acc(&test, &mut rng);
        assert!((a_train + a_test - 1.0).abs() < 0.02, "{a_train} + {a_test}");
    }

    #[test]
    fn attribute_space_table_is_normalized() {
        let mut task = SyntheticTask::new(4, 8, 3);
        task.rho = 0.5;
        let space = task.attribute_space();
        assert_eq!(space.joint.len(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = space.sample(&mut rng);
        assert!(v[0] < 4 && v[1] < 2);
    }
}
