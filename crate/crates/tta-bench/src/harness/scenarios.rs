//! The named scenario families the default suite evaluates: corruption
//! shifts, label shift, spurious correlation, and non-stationary streams.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::streams::{
    spurious_task, Corruption, SamplerKind, ShiftKind, SlotSpec, StreamSpec, SyntheticTask,
};

use super::HarnessError;

/// One runnable scenario: a task, a stream specification over it, and
/// reference annotations carried into every record it produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Clean distribution to pretrain on.
    pub train_task: SyntheticTask,
    /// Shifted distribution the stream draws from.
    pub task: SyntheticTask,
    pub stream: StreamSpec,
    /// Context strings (e.g. full-scale reference numbers from the
    /// literature); reported alongside results, never asserted against.
    pub annotations: BTreeMap<String, String>,
}

fn notes(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Default scenario dimensions: 4 classes, 6 input coordinates.
pub const CLASS_COUNT: usize = 4;
pub const INPUT_DIM: usize = 6;
const BATCH_SIZE: usize = 32;
const N_BATCHES: usize = 16;

/// The task every default scenario adapts from; pretraining happens on this
/// unshifted distribution.
pub fn source_task(seed: u64) -> SyntheticTask {
    SyntheticTask::new(CLASS_COUNT, INPUT_DIM, seed)
}

/// Corruption-style covariate shifts of a fixed severity, one slot per
/// corruption kind.
pub fn common_shifts(seed: u64) -> Scenario {
    let mut task = source_task(seed);
    task.mean_shift = 0.8;
    let kinds = [
        Corruption::GaussianNoise,
        Corruption::Blur,
        Corruption::Contrast,
        Corruption::PixelateAnalogue,
    ];
    let slots = kinds
        .iter()
        .map(|&k| SlotSpec {
            n_trials: N_BATCHES / kinds.len() * BATCH_SIZE,
            sampler: SamplerKind::Iid,
            corruption: Some((k, 3)),
            mean_shift: None,
        })
        .collect();
    Scenario {
        name: "common_shifts".into(),
        train_task: source_task(seed),
        task,
        stream: StreamSpec {
            slots,
            batch_size: BATCH_SIZE,
            seed,
            shift_kind: ShiftKind::AttributeValues,
            strict_pools: false,
        },
        annotations: notes(&[
            (
                "reference_full_scale",
                "CIFAR10-C severity 5: baseline error 44.3, batch-norm statistic adaptation 27.5",
            ),
        ]),
    }
}

/// Dirichlet label shift: each slot draws its label distribution from
/// `Dir(alpha)`, so small `alpha` concentrates slots on few classes.
pub fn label_shift(alpha: f64, seed: u64) -> Scenario {
    let mut task = source_task(seed);
    task.mean_shift = 0.8;
    task.corruption = Some((Corruption::GaussianNoise, 2));
    Scenario {
        name: format!("label_shift_a{alpha}"),
        train_task: source_task(seed),
        task,
        stream: StreamSpec {
            slots: (0..N_BATCHES)
                .map(|_| SlotSpec {
                    n_trials: BATCH_SIZE,
                    sampler: SamplerKind::DirichletLabel { alpha },
                    corruption: None,
                    mean_shift: None,
                })
                .collect(),
            batch_size: BATCH_SIZE,
            seed,
            shift_kind: ShiftKind::Label,
            strict_pools: false,
        },
        annotations: notes(&[(
            "reference_full_scale",
            "CIFAR10-C online label shift, alpha 0.01: baseline error 7.8 vs batch-norm statistic adaptation 77.8",
        )]),
    }
}

/// Attribute-relationship shift: the style coordinate correlates positively
/// with the label during pretraining and negatively at test time.
pub fn spurious(seed: u64) -> Scenario {
    let base = source_task(seed);
    let (train_task, test_task) =
        spurious_task(&base, 0.9, -0.9, 0.05).expect("valid correlations");
    Scenario {
        name: "spurious".into(),
        train_task,
        task: test_task,
        stream: StreamSpec {
            slots: vec![SlotSpec {
                n_trials: N_BATCHES * BATCH_SIZE,
                sampler: SamplerKind::Iid,
                corruption: None,
                mean_shift: None,
            }],
            batch_size: BATCH_SIZE,
            seed,
            shift_kind: ShiftKind::AttributeRelationship,
            strict_pools: false,
        },
        annotations: notes(&[(
            "reference_full_scale",
            "spurious-correlation benchmarks: adaptation gains are small or negative when the shifted attribute is predictive at train time",
        )]),
    }
}

/// Severity ramps up over consecutive slots, then the corruption kind
/// switches: a continually changing stream.
pub fn nonstationary(seed: u64) -> Scenario {
    let mut task = source_task(seed);
    task.mean_shift = 0.4;
    let mut slots = Vec::new();
    for sev in 1..=4u8 {
        slots.push(SlotSpec {
            n_trials: 2 * BATCH_SIZE,
            sampler: SamplerKind::Iid,
            corruption: Some((Corruption::GaussianNoise, sev)),
            mean_shift: None,
        });
    }
    for sev in 1..=4u8 {
        slots.push(SlotSpec {
            n_trials: 2 * BATCH_SIZE,
            sampler: SamplerKind::Iid,
            corruption: Some((Corruption::Contrast, sev)),
            mean_shift: None,
        });
    }
    Scenario {
        name: "nonstationary".into(),
        train_task: source_task(seed),
        task,
        stream: StreamSpec {
            slots,
            batch_size: BATCH_SIZE,
            seed,
            shift_kind: ShiftKind::Nonstationary,
            strict_pools: false,
        },
        annotations: notes(&[(
            "reference_full_scale",
            "episodic vs online gap at full scale: marginal-entropy augmentation adaptation error 38.1 episodic vs 85.2 online",
        )]),
    }
}

/// Unshifted control stream over the source task.
pub fn unshifted(seed: u64) -> Scenario {
    Scenario {
        name: "unshifted".into(),
        train_task: source_task(seed),
        task: source_task(seed),
        stream: StreamSpec::iid(N_BATCHES, BATCH_SIZE, seed),
        annotations: BTreeMap::new(),
    }
}

/// The default suite, in a fixed order.
pub fn default_suite(seed: u64) -> Vec<Scenario> {
    vec![
        common_shifts(seed),
        label_shift(0.1, seed),
        spurious(seed),
        nonstationary(seed),
    ]
}

/// Look a scenario up by name; `label_shift` accepts an optional
/// `label_shift_a<alpha>` suffix.
pub fn by_name(name: &str, seed: u64) -> Result<Scenario, HarnessError> {
    match name {
        "common_shifts" => Ok(common_shifts(seed)),
        "spurious" => Ok(spurious(seed)),
        "nonstationary" => Ok(nonstationary(seed)),
        "unshifted" => Ok(unshifted(seed)),
        "label_shift" => Ok(label_shift(0.1, seed)),
        other => {
            if let Some(rest) = other.strip_prefix("label_shift_a") {
                if let Ok(alpha) = rest.parse::<f64>() {
                    if alpha > 0.0 {
                        return Ok(label_shift(alpha, seed));
                    }
                }
            }
            Err(HarnessError::UnknownScenario(other.to_string()))
        }
    }
}

pub const SCENARIO_NAMES: [&str; 5] = [
    "common_shifts",
    "label_shift",
    "spurious",
    "nonstationary",
    "unshifted",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::build_stream;

    #[test]
    fn every_scenario_builds_a_stream() {
        for s in default_suite(5)
            .into_iter()
            .chain(std::iter::once(unshifted(5)))
        {
            s.stream.validate().unwrap();
            let batches = build_stream(&s.stream, &s.task).unwrap();
            assert!(!batches.is_empty(), "{}", s.name);
            for b in &batches {
                assert_eq!(b.inputs.nrows(), b.labels.len());
            }
        }
    }

    #[test]
    fn lookup_by_name() {
        for n in SCENARIO_NAMES {
            assert!(by_name(n, 1).is_ok(), "{n}");
        }
        let s = by_name("label_shift_a0.01", 1).unwrap();
        assert_eq!(s.name, "label_shift_a0.01");
        assert!(by_name("imagenet", 1).is_err());
        assert!(by_name("label_shift_a-2", 1).is_err());
    }

    #[test]
    fn spurious_test_rho_is_negative() {
        let s = spurious(3);
        assert!(s.task.rho < 0.0);
    }

    #[test]
    fn scenarios_carry_reference_annotations() {
        for s in default_suite(2) {
            assert!(
                s.annotations.contains_key("reference_full_scale"),
                "{}",
                s.name
            );
        }
    }
}
