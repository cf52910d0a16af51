//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail verdict line. Full-scale reference numbers travel as scenario
//! annotations and are never asserted at this scale; the assertions here
//! are exact algorithmic properties plus directional reproductions of the
//! three pitfalls (hyperparameter sensitivity, model quality, label shift).

use std::collections::BTreeMap;
use std::io::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tta_bench::harness::records::{load_records, persist_records};
use tta_bench::harness::{self, scenarios, EvalSettings};
use tta_bench::methods::losses::{
    eval_loss, loss_and_grads, AuxCrossEntropy, CrossEntropyFixed, InfoMaxPseudo, MarginalEntropy,
    MeanEntropy,
};
use tta_bench::methods::noniid::PbrsBuffer;
use tta_bench::methods::regularizers::{fisher_penalty, fisher_weights, stochastic_restore};
use tta_bench::methods::{build_strategy, OptimizerConfig, SgdMomentum, METHOD_NAMES};
use tta_bench::model::{AdaptiveModel, GradMap, ModelState, StatsMode};
use tta_bench::num::{accuracy, least_squares_slope, spearman};
use tta_bench::pretrain::{train_base, AugPolicy, CheckpointSequence, ToyModelSpec, TrainConfig};
use tta_bench::selection::{
    grid_search, oracle_select, run_protocol, Protocol, ProtocolConfig, SelectionRule, LR_GRID,
    STEPS_GRID,
};
use tta_bench::streams::{build_stream, TestBatch};

/// Print the verdict both through the captured test output and straight to
/// the real stderr so it shows up in the test log, then enforce it.
fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {n} ({name}): {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    if let Ok(mut f) = std::fs::OpenOptions::new().write(true).open("/proc/self/fd/2") {
        let _ = writeln!(f, "{line}");
    }
    println!("{line}");
    assert!(pass, "{line}");
}

const FIVE_SEEDS: [u64; 5] = [2022, 2023, 2024, 2025, 2026];

fn pretrain(
    task: &tta_bench::streams::SyntheticTask,
    seed: u64,
    epochs: usize,
    train_size: usize,
    aux_head: bool,
) -> (AdaptiveModel, CheckpointSequence) {
    let cfg = TrainConfig {
        epochs,
        train_size,
        val_size: 256,
        aux_head,
        seed,
        ..Default::default()
    };
    train_base(task, ToyModelSpec::MlpBn, AugPolicy::Standard, &cfg).expect("pretraining succeeds")
}

fn stream_error(
    model: &AdaptiveModel,
    method: &str,
    params: &serde_json::Value,
    stream: &[TestBatch],
    protocol: Protocol,
    selection: SelectionRule,
    lr: f64,
    steps: usize,
    seed: u64,
) -> tta_bench::selection::RunOutcome {
    let mut strategy = build_strategy(method, params).expect("known method");
    let cfg = ProtocolConfig {
        protocol,
        selection,
        steps,
        learning_rate: lr,
        seed,
    };
    run_protocol(model, strategy.as_mut(), stream, &cfg).expect("protocol run succeeds")
}

fn baseline_accuracy(model: &AdaptiveModel, stream: &[TestBatch]) -> f64 {
    let mut correct = 0.0;
    let mut total = 0.0;
    for b in stream {
        let p = model.probs(&b.inputs, StatsMode::Running);
        correct += accuracy(&p, &b.labels) * b.labels.len() as f64;
        total += b.labels.len() as f64;
    }
    correct / total
}

// ------------------------------------------------------------- criterion 1

/// Oracle selection must return the argmax-accuracy candidate over the
/// whole trajectory (entry state included), ties to the earliest index —
/// verified against an independent brute-force re-enumeration for every
/// method on every corpus batch.
#[test]
fn criterion_1_algorithm_fidelity() {
    let scenario = scenarios::common_shifts(2022);
    let (model, _) = pretrain(&scenario.train_task, 2022, 6, 512, true);
    let stream = build_stream(&scenario.stream, &scenario.task).unwrap();
    let steps = 4; // M <= 5: brute force is exhaustive
    let memo_params = serde_json::json!({ "n_aug": 4 });
    let null = serde_json::Value::Null;
    let mut pass = true;
    for name in METHOD_NAMES {
        let params = if name == "memo" { &memo_params } else { &null };
        for batch in stream.iter().take(3) {
            let mut m = model.clone();
            let mut strat = build_strategy(name, params).unwrap();
            strat.reset(&m);
            let mut opt = SgdMomentum::new(OptimizerConfig::with_lr(5e-3));
            let mut rng = ChaCha8Rng::seed_from_u64(batch.batch_index as u64 * 7 + 1);
            let out = oracle_select(
                &mut m,
                strat.as_mut(),
                &mut opt,
                &batch.inputs,
                &batch.labels,
                steps,
                &mut rng,
            )
            .unwrap();

            // brute force: replay the identical trajectory and enumerate
            let mut m2 = model.clone();
            let mut strat2 = build_strategy(name, params).unwrap();
            strat2.reset(&m2);
            let mut opt2 = SgdMomentum::new(OptimizerConfig::with_lr(5e-3));
            let mut rng2 = ChaCha8Rng::seed_from_u64(batch.batch_index as u64 * 7 + 1);
            let mut expect = vec![accuracy(&strat2.predict(&m2, &batch.inputs), &batch.labels)];
            for _ in 0..steps {
                strat2
                    .adapt(&mut m2, &batch.inputs, &mut opt2, &mut rng2)
                    .unwrap();
                expect.push(accuracy(&strat2.predict(&m2, &batch.inputs), &batch.labels));
            }
            let mut best = 0;
            for (i, &s) in expect.iter().enumerate() {
                if s > expect[best] {
                    best = i;
                }
            }
            let selected = out.scores[out.selected_step];
            pass &= out.scores == expect
                && out.selected_step == best
                && out.scores.iter().all(|&s| selected >= s)
                // the winner is restored, not merely reported
                && (accuracy(&strat.predict(&m, &batch.inputs), &batch.labels) - selected).abs()
                    < 1e-12;
            if !pass {
                eprintln!("fidelity breach: {name} batch {}", batch.batch_index);
                break;
            }
        }
    }
    verdict(1, "oracle selection fidelity", pass, "(brute-force match, M=4)");
}

// ------------------------------------------------------------- criterion 2

fn fd_check(
    model: &mut AdaptiveModel,
    grads: &GradMap,
    eval: &dyn Fn(&AdaptiveModel) -> f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    let names = model.param_names();
    let eps = 1e-6;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 10 {
        attempts += 1;
        if attempts >= 2000 {
            let maxg = grads
                .values()
                .flat_map(|v| v.iter())
                .fold(0.0f64, |a, &b| a.max(b.abs()));
            panic!(
                "could not find 10 numerically stable coordinates ({checked} found); \
                 loss {} max |grad| {maxg:.3e} params {}",
                eval(model),
                names.len()
            );
        }
        let name = &names[rng.gen_range(0..names.len())];
        let len = model.param(name).unwrap().len();
        let k = rng.gen_range(0..len);
        let orig = model.param(name).unwrap()[k];
        model.param_mut(name).unwrap()[k] = orig + eps;
        let lp = eval(model);
        model.param_mut(name).unwrap()[k] = orig - eps;
        let lm = eval(model);
        model.param_mut(name).unwrap()[k] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let an = grads.get(name).map(|g| g[k]).unwrap_or(0.0);
        if fd.abs() < 1e-7 && an.abs() < 1e-7 {
            continue; // roundoff-dominated coordinate; resample
        }
        checked += 1;
        if (fd - an).abs() / fd.abs().max(an.abs()) >= 1e-4 {
            eprintln!("gradient mismatch at {name}[{k}]: fd={fd} analytic={an}");
            return false;
        }
    }
    true
}

/// Every adaptation loss passes central finite differences on a small net.
#[test]
fn criterion_2_gradient_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut model = AdaptiveModel::mlp(
        &mut rng,
        scenarios::INPUT_DIM,
        10,
        2,
        scenarios::CLASS_COUNT,
        tta_bench::model::NormKind::Batch,
        1,
        true,
    );
    // move off the random init: near-uniform predictions sit at a critical
    // point of the entropy losses, where every gradient vanishes. A few
    // supervised steps give moderately confident, non-saturated outputs.
    let xt = Array2::from_shape_fn((32, scenarios::INPUT_DIM), |_| rng.gen_range(-1.5..1.5));
    let mut targets = Array2::zeros((32, scenarios::CLASS_COUNT));
    for i in 0..32 {
        targets[[i, rng.gen_range(0..scenarios::CLASS_COUNT)]] = 1.0;
    }
    let warmup = CrossEntropyFixed { targets };
    let names = model.param_names();
    let mut opt = SgdMomentum::new(OptimizerConfig::with_lr(0.3));
    for _ in 0..40 {
        let (_, g) = loss_and_grads(&model, &xt, StatsMode::Batch, &warmup);
        opt.step(&mut model, &g, &names);
    }
    let x = Array2::from_shape_fn((8, scenarios::INPUT_DIM), |_| rng.gen_range(-1.5..1.5));
    let logits = model.logits(&x, StatsMode::Batch);
    let probs = tta_bench::num::softmax_rows(&logits);
    let pseudo: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|r| tta_bench::num::argmax_tie_low(r.as_slice().unwrap()))
        .collect();
    let aux_targets: Vec<usize> = (0..x.nrows()).map(|i| i % 4).collect();
    let objectives: Vec<(&str, Box<dyn tta_bench::methods::losses::Objective>)> = vec![
        ("entropy minimization", Box::new(MeanEntropy::all())),
        (
            "filtered entropy",
            Box::new(MeanEntropy {
                mask: Some((0..x.nrows()).map(|i| i % 2 == 0).collect()),
            }),
        ),
        (
            // temperature-sharpened targets, as in conjugate pseudo-labels;
            // targets equal to the current predictions would sit exactly at
            // the stationary point of this loss
            "soft pseudo-label cross-entropy",
            Box::new(CrossEntropyFixed {
                targets: tta_bench::num::softmax_rows(&logits.mapv(|v| v / 0.5)),
            }),
        ),
        (
            "information maximization",
            Box::new(InfoMaxPseudo {
                beta: 0.3,
                pseudo: pseudo.clone(),
                confident: vec![true; x.nrows()],
            }),
        ),
        ("marginal entropy", Box::new(MarginalEntropy)),
        (
            "auxiliary transform cross-entropy",
            Box::new(AuxCrossEntropy {
                targets: aux_targets,
            }),
        ),
    ];
    let mut pass = true;
    for (label, obj) in &objectives {
        let (_, grads) = loss_and_grads(&model, &x, StatsMode::Batch, obj.as_ref());
        let ok = fd_check(
            &mut model,
            &grads,
            &|m| eval_loss(m, &x, StatsMode::Batch, obj.as_ref()),
            &mut rng,
        );
        if !ok {
            eprintln!("finite-difference failure in {label}");
        }
        pass &= ok;
    }
    // anchor penalty: gradients of lambda * sum F (theta - anchor)^2
    let anchor = model.snapshot();
    let fisher = fisher_weights(&model, &x);
    let names = model.param_names();
    for name in &names {
        for v in model.param_mut(name).unwrap() {
            *v += 0.05;
        }
    }
    let mut grads = GradMap::new();
    fisher_penalty(&model, &anchor, &fisher, 0.7, &names, &mut grads).unwrap();
    let eval = |m: &AdaptiveModel| {
        let mut g = GradMap::new();
        fisher_penalty(m, &anchor, &fisher, 0.7, &names, &mut g).unwrap()
    };
    pass &= fd_check(&mut model, &grads, &eval, &mut rng);
    verdict(2, "gradient finite differences", pass, "(7 losses, rel err < 1e-4)");
}

// ------------------------------------------------------------- criterion 3

/// The default learning-rate x steps grid must itself swing results by at
/// least 10 error points for entropy minimization on covariate shift.
#[test]
fn criterion_3_pitfall_sensitivity() {
    let mut worst_spread = f64::MAX;
    let mut pass = true;
    for seed in FIVE_SEEDS {
        // A deliberately fragile setting: a barely trained checkpoint, severe
        // corruption, and tiny batches, so the grid choice actually matters.
        let mut scenario = scenarios::common_shifts(seed);
        scenario.task.mean_shift = 1.0;
        let (model, _) = pretrain(&scenario.train_task, seed, 1, 256, false);
        let mut spec = scenario.stream.clone();
        spec.seed = seed;
        spec.batch_size = 8;
        for slot in &mut spec.slots {
            slot.n_trials = 256;
            if let Some((_, sev)) = &mut slot.corruption {
                *sev = 4;
            }
        }
        let stream = build_stream(&spec, &scenario.task).unwrap();
        let base = ProtocolConfig {
            protocol: Protocol::Online,
            selection: SelectionRule::Last,
            steps: 1,
            learning_rate: 1e-3,
            seed,
        };
        let grid = grid_search(
            &model,
            "tent",
            &serde_json::Value::Null,
            &stream,
            &base,
            &LR_GRID,
            &STEPS_GRID,
        )
        .unwrap();
        let accs: Vec<f64> = grid.points.iter().map(|p| p.mean_accuracy).collect();
        let spread =
            100.0 * (accs.iter().cloned().fold(f64::MIN, f64::max)
                - accs.iter().cloned().fold(f64::MAX, f64::min));
        worst_spread = worst_spread.min(spread);
        pass &= spread >= 10.0;
    }
    verdict(
        3,
        "hyperparameter sensitivity",
        pass,
        &format!("(min grid spread {worst_spread:.1} points, 5 seeds)"),
    );
}

// ------------------------------------------------------------- criterion 4

/// Online adaptation with an aggressive rate degrades over the stream
/// (negative accuracy slope, >5-point first-to-last-quintile drop) while
/// episodic oracle selection on the same stream stays flat.
#[test]
fn criterion_4_pitfall_batch_dependency() {
    let mut pass = true;
    let mut details = Vec::new();
    for seed in FIVE_SEEDS {
        // A long homogeneous stream: every batch is equally hard, so any
        // first-to-last trend is attributable to accumulated adaptation.
        let scenario = scenarios::common_shifts(seed);
        let (model, _) = pretrain(&scenario.train_task, seed, 8, 768, false);
        let mut spec = scenario.stream.clone();
        spec.seed = seed;
        spec.batch_size = 64;
        spec.slots.truncate(1);
        spec.slots[0].n_trials = 50 * 64;
        spec.slots[0].corruption = Some((tta_bench::streams::Corruption::GaussianNoise, 3));
        let stream = build_stream(&spec, &scenario.task).unwrap();
        let online = stream_error(
            &model,
            "shot",
            &serde_json::Value::Null,
            &stream,
            Protocol::Online,
            SelectionRule::Last,
            0.5,
            10,
            seed,
        );
        let episodic = stream_error(
            &model,
            "shot",
            &serde_json::Value::Null,
            &stream,
            Protocol::Episodic,
            SelectionRule::Oracle,
            0.5,
            10,
            seed,
        );
        let gap = |out: &tta_bench::selection::RunOutcome| {
            let accs: Vec<f64> = out.batches.iter().map(|b| b.accuracy).collect();
            let q = (accs.len() / 5).max(1);
            let first = accs[..q].iter().sum::<f64>() / q as f64;
            let last = accs[accs.len() - q..].iter().sum::<f64>() / q as f64;
            (first - last, least_squares_slope(&accs))
        };
        let (online_gap, online_slope) = gap(&online);
        let (episodic_gap, _) = gap(&episodic);
        details.push(format!("{:.1}/{:.1}", 100.0 * online_gap, 100.0 * episodic_gap));
        pass &= online_slope < 0.0 && online_gap > 0.05 && episodic_gap.abs() < 0.02;
    }
    verdict(
        4,
        "batch dependency",
        pass,
        &format!("(online vs episodic quintile drop, points: {})", details.join(" ")),
    );
}

// ------------------------------------------------------------- criterion 5

/// Better source checkpoints stay better after adaptation: rank correlation
/// between source validation accuracy and post-adaptation accuracy.
#[test]
fn criterion_5_pitfall_model_quality() {
    let mut majority = 0;
    for seed in FIVE_SEEDS {
        let scenario = scenarios::common_shifts(seed);
        let train_cfg = TrainConfig {
            epochs: 6,
            train_size: 384,
            val_size: 256,
            seed,
            ..Default::default()
        };
        let (final_model, seq) = train_base(
            &scenario.train_task,
            ToyModelSpec::MlpBn,
            AugPolicy::Standard,
            &train_cfg,
        )
        .unwrap();
        let mut spec = scenario.stream.clone();
        spec.seed = seed;
        let stream = build_stream(&spec, &scenario.task).unwrap();
        let val: Vec<f64> = seq.checkpoints.iter().map(|c| c.val_accuracy).collect();
        let mut all_ok = true;
        for method in ["bn_adapt", "tent"] {
            let mut post = Vec::new();
            for c in &seq.checkpoints {
                let mut m = final_model.clone();
                m.restore(&c.state).unwrap();
                let out = stream_error(
                    &m,
                    method,
                    &serde_json::Value::Null,
                    &stream,
                    Protocol::Episodic,
                    SelectionRule::Oracle,
                    1e-3,
                    3,
                    seed,
                );
                post.push(out.mean_accuracy);
            }
            all_ok &= spearman(&val, &post) >= 0.8;
        }
        if all_ok {
            majority += 1;
        }
    }
    verdict(
        5,
        "model quality rank correlation",
        majority * 2 > FIVE_SEEDS.len(),
        &format!("({majority}/5 seeds with Spearman >= 0.8 over 6 checkpoints)"),
    );
}

// ------------------------------------------------------------- criterion 6

/// Severe label shift (alpha = 0.01) makes batch-statistic methods worse
/// than no adaptation; near-uniform label draws (alpha = 10) shrink or
/// reverse that excess.
#[test]
fn criterion_6_pitfall_label_shift() {
    let mut pass = true;
    let mut excess = BTreeMap::new();
    for &alpha in &[0.01, 10.0] {
        let mut mean_excess = 0.0;
        for seed in FIVE_SEEDS {
            let scenario = scenarios::label_shift(alpha, seed);
            let (model, _) = pretrain(&scenario.train_task, seed, 8, 768, false);
            let mut spec = scenario.stream.clone();
            spec.seed = seed;
            let stream = build_stream(&spec, &scenario.task).unwrap();
            let base_err = 1.0 - baseline_accuracy(&model, &stream);
            for method in ["bn_adapt", "tent"] {
                let out = stream_error(
                    &model,
                    method,
                    &serde_json::Value::Null,
                    &stream,
                    Protocol::Online,
                    SelectionRule::Last,
                    1e-3,
                    1,
                    seed,
                );
                let err = 1.0 - out.mean_accuracy;
                mean_excess += (err - base_err) / (2.0 * FIVE_SEEDS.len() as f64);
                if alpha == 0.01 {
                    pass &= err > base_err;
                }
            }
        }
        excess.insert(format!("{alpha}"), mean_excess);
    }
    pass &= excess["10"] < excess["0.01"];
    verdict(
        6,
        "label shift harms statistic adaptation",
        pass,
        &format!(
            "(mean excess error {:.1} points at alpha 0.01, {:.1} at alpha 10)",
            100.0 * excess["0.01"],
            100.0 * excess["10"]
        ),
    );
}

// ------------------------------------------------------------- criterion 7

/// Marginal-entropy augmentation adaptation is built for episodic use:
/// running it online should do no better, usually worse.
#[test]
fn criterion_7_memo_protocol_asymmetry() {
    let params = serde_json::json!({ "n_aug": 8 });
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in FIVE_SEEDS {
        // Distribution shifts mid-stream, so state carried across batches
        // goes stale; episodic resets are immune to that.
        let scenario = scenarios::nonstationary(seed);
        let (model, _) = pretrain(&scenario.train_task, seed, 8, 768, false);
        let mut spec = scenario.stream.clone();
        spec.seed = seed;
        let stream = build_stream(&spec, &scenario.task).unwrap();
        let run = |protocol| {
            stream_error(
                &model, "memo", &params, &stream, protocol, SelectionRule::Last, 1.0, 25, seed,
            )
        };
        let online_err = 1.0 - run(Protocol::Online).mean_accuracy;
        let episodic_err = 1.0 - run(Protocol::Episodic).mean_accuracy;
        gaps.push(format!("{:+.1}", 100.0 * (online_err - episodic_err)));
        if online_err >= episodic_err {
            wins += 1;
        }
    }
    verdict(
        7,
        "episodic/online asymmetry",
        wins >= 4,
        &format!("({wins}/5 seeds online >= episodic; gaps {} points)", gaps.join(" ")),
    );
}

// ------------------------------------------------------------- criterion 8

/// Cross-module invariants, asserted exactly as stated.
#[test]
fn criterion_8_invariant_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let scenario = scenarios::common_shifts(11);
    let (model, _) = pretrain(&scenario.train_task, 11, 4, 512, true);
    let stream = build_stream(&scenario.stream, &scenario.task).unwrap();

    // snapshot round-trip is bit-exact
    let snap = model.snapshot();
    assert_eq!(snap, ModelState::from_json(&snap.to_json()).unwrap());

    // label blindness: under the label-free selection rule, relabeling the
    // stream cannot change the adapted model
    let cfg = ProtocolConfig {
        protocol: Protocol::Online,
        selection: SelectionRule::Last,
        steps: 2,
        learning_rate: 1e-3,
        seed: 11,
    };
    let mut strat = build_strategy("tent", &serde_json::Value::Null).unwrap();
    let a = run_protocol(&model, strat.as_mut(), &stream, &cfg).unwrap();
    let mut relabeled = stream.clone();
    for b in &mut relabeled {
        for l in &mut b.labels {
            *l = (*l + 1) % scenarios::CLASS_COUNT;
        }
    }
    let mut strat = build_strategy("tent", &serde_json::Value::Null).unwrap();
    let b = run_protocol(&model, strat.as_mut(), &relabeled, &cfg).unwrap();
    assert_eq!(a.final_state, b.final_state, "labels leaked into adaptation");

    // group discipline: one adaptation step only touches declared groups
    let memo_params = serde_json::json!({ "n_aug": 4 });
    let null = serde_json::Value::Null;
    for name in METHOD_NAMES {
        let params = if name == "memo" { &memo_params } else { &null };
        let mut m = model.clone();
        let mut strat = build_strategy(name, params).unwrap();
        strat.reset(&m);
        let mut opt = SgdMomentum::new(OptimizerConfig::with_lr(5e-3));
        strat
            .adapt(&mut m, &stream[0].inputs, &mut opt, &mut rng)
            .unwrap();
        let allowed: Vec<String> = strat
            .meta()
            .updates
            .iter()
            .flat_map(|&g| m.group_members(g))
            .collect();
        for pname in model.param_names() {
            if !allowed.contains(&pname) {
                assert_eq!(
                    model.param(&pname).unwrap(),
                    m.param(&pname).unwrap(),
                    "{name} modified undeclared parameter {pname}"
                );
            }
        }
    }

    // episodic independence: dropping earlier batches leaves later batch
    // results unchanged
    let cfg = ProtocolConfig {
        protocol: Protocol::Episodic,
        selection: SelectionRule::Oracle,
        steps: 2,
        learning_rate: 1e-3,
        seed: 11,
    };
    let mut strat = build_strategy("tent", &null).unwrap();
    let full = run_protocol(&model, strat.as_mut(), &stream, &cfg).unwrap();
    let mut strat = build_strategy("tent", &null).unwrap();
    let tail = run_protocol(&model, strat.as_mut(), &stream[8..], &cfg).unwrap();
    for (x, y) in full.batches[8..].iter().zip(&tail.batches) {
        assert_eq!(x.accuracy, y.accuracy, "episodic batches are not independent");
    }

    // Dirichlet monotonicity: smaller alpha concentrates batch labels
    let concentration = |alpha: f64| {
        let sc = scenarios::label_shift(alpha, 11);
        let s = build_stream(&sc.stream, &sc.task).unwrap();
        s.iter()
            .map(|b| {
                let mut counts = vec![0.0; scenarios::CLASS_COUNT];
                for &l in &b.labels {
                    counts[l] += 1.0 / b.labels.len() as f64;
                }
                counts.iter().map(|c| (c - 0.25).abs()).sum::<f64>()
            })
            .sum::<f64>()
            / s.len() as f64
    };
    assert!(concentration(0.01) > concentration(10.0) + 0.3);

    // PBRS bounds: class counts in the balanced buffer differ by at most 1
    let mut buf = PbrsBuffer::new(16, scenarios::CLASS_COUNT);
    for i in 0..400 {
        let class = (rng.gen_range(0.0f64..1.0).powi(2) * 4.0) as usize % 4;
        buf.push(vec![i as f64], class, &mut rng);
    }
    let counts = buf.counts();
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);

    // stochastic restore at p = 0 and p = 1 is exact
    let anchor = model.snapshot();
    let mut m = model.clone();
    for pname in m.param_names() {
        for v in m.param_mut(&pname).unwrap() {
            *v += 0.25;
        }
    }
    let drifted = m.snapshot();
    stochastic_restore(&mut m, &anchor, 0.0, &mut rng);
    assert_eq!(m.snapshot(), drifted);
    stochastic_restore(&mut m, &anchor, 1.0, &mut rng);
    for pname in m.param_names() {
        assert_eq!(m.param(&pname).unwrap(), anchor.parameters[&pname].data.as_slice());
    }

    // persist/load round-trip
    let dir = tempfile::tempdir().unwrap();
    let settings = EvalSettings {
        methods: vec!["bn_adapt".into()],
        seeds: vec![2022],
        steps: 1,
        ..Default::default()
    };
    let records = harness::evaluate(&model, "mlp_bn", &scenario, &settings).unwrap();
    let path = dir.path().join("records.jsonl");
    persist_records(&records, &path).unwrap();
    let mut loaded = load_records(&path).unwrap();
    for (r, l) in records.iter().zip(&mut loaded) {
        l.runtime_s = r.runtime_s; // runtime is not persisted by design
    }
    assert_eq!(records, loaded);

    verdict(8, "invariant suites", true, "(8 invariants)");
}

// ------------------------------------------------------------- criterion 9

/// Two executions of the default scenario suite from one configuration
/// yield bitwise-identical persisted records.
#[test]
fn criterion_9_end_to_end_determinism() {
    let cfg = tta_bench::harness::config::ExperimentConfig::parse(
        "scenario = \"common_shifts\"\nmethods = [\"bn_adapt\", \"tent\"]\nsteps = 10\n",
        &[],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for pass_idx in 0..2 {
        let path = dir.path().join(format!("suite_{pass_idx}.jsonl"));
        let mut all = Vec::new();
        for scenario in scenarios::default_suite(cfg.scenario_seed) {
            let (model, _) = pretrain(&scenario.train_task, cfg.scenario_seed, 6, 512, false);
            let mut records =
                harness::evaluate(&model, &cfg.model, &scenario, &cfg.eval_settings()).unwrap();
            all.append(&mut records);
        }
        persist_records(&all, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    let identical = bytes[0] == bytes[1];
    verdict(
        9,
        "end-to-end determinism",
        identical,
        &format!("({} bytes, 4 scenarios x 3 seeds)", bytes[0].len()),
    );
}
