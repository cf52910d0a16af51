//! Command-line front end for the test-time-adaptation benchmark.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime
//! failures. Set `TTA_BENCH_OUT` to redirect the output root.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tta_bench::harness::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use tta_bench::harness::reports::SENSITIVITY_REFERENCE;
use tta_bench::harness::{self, scenarios, HarnessError};
use tta_bench::methods::{method_meta, METHOD_NAMES};
use tta_bench::model::AdaptiveModel;
use tta_bench::pretrain::{
    train_base, AugPolicy, CheckpointSequence, ToyModelSpec, TrainConfig,
};
use tta_bench::selection::{
    grid_search, Protocol, ProtocolConfig, SelectionRule, LR_GRID, STEPS_GRID,
};

#[derive(Parser)]
#[command(
    name = "tta-bench",
    about = "Benchmark harness for test-time adaptation on synthetic shift streams",
    after_help = format!("Output root defaults to the configured directory; ${OUTPUT_ROOT_ENV} overrides it.")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source checkpoint and save its per-epoch sequence as JSON.
    Pretrain {
        /// Architecture: mlp_bn, mlp_gn, mlp_ln, or small_conv_bn.
        #[arg(long, default_value = "mlp_bn")]
        model: String,
        /// Augmentation policy: none, standard, mixup_standard, strong_a, strong_b.
        #[arg(long, default_value = "standard")]
        policy: String,
        /// Seed for the source task and training data.
        #[arg(long, default_value_t = 5)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        /// Include the self-supervised auxiliary head.
        #[arg(long)]
        aux_head: bool,
        /// Output file (default: <root>/checkpoints/<model>_<policy>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment described by a TOML config and persist records.
    Run {
        /// Experiment TOML; omitted means the built-in default experiment.
        config: Option<PathBuf>,
        /// Dotted-path overrides, e.g. `--set steps=5 --set params.tent.fisher_lambda=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Reuse a checkpoint sequence written by `pretrain` instead of
        /// training on the fly.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one method over the learning-rate x steps grid; write CSV and
    /// a sensitivity heatmap.
    Sweep {
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "common_shifts")]
        scenario: String,
        #[arg(long, default_value = "mlp_bn")]
        model: String,
        #[arg(long, default_value_t = 2022)]
        seed: u64,
        #[arg(long, value_enum, default_value = "online")]
        protocol: ProtocolArg,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Summarize persisted records; optionally emit per-run trace figures.
    Report {
        records: PathBuf,
        /// Average multi-domain streams per-sample instead of per-domain.
        #[arg(long)]
        sample_weighted: bool,
        /// Directory to write accuracy-trace SVGs into.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// List the registered adaptation methods and their properties.
    ListMethods,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProtocolArg {
    Episodic,
    Online,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Protocol {
        match p {
            ProtocolArg::Episodic => Protocol::Episodic,
            ProtocolArg::Online => Protocol::Online,
        }
    }
}

/// Configuration mistakes exit with 2; everything else that fails exits 3.
fn is_config_error(err: &HarnessError) -> bool {
    use tta_bench::methods::MethodError;
    match err {
        HarnessError::Config(_) | HarnessError::UnknownScenario(_) => true,
        HarnessError::Method(MethodError::UnknownMethod(_))
        | HarnessError::Method(MethodError::InvalidConfig { .. }) => true,
        HarnessError::Pretrain(p) => matches!(
            p,
            tta_bench::pretrain::PretrainError::UnknownArchitecture(_)
                | tta_bench::pretrain::PretrainError::UnknownPolicy(_)
                | tta_bench::pretrain::PretrainError::InvalidConfig(_)
        ),
        _ => false,
    }
}

fn output_root(fallback: &Path) -> PathBuf {
    match std::env::var(OUTPUT_ROOT_ENV) {
        Ok(v) if !v.is_empty() => v.into(),
        _ => fallback.to_path_buf(),
    }
}

fn train_checkpoint(
    model: &str,
    policy: &str,
    seed: u64,
    epochs: usize,
    aux_head: bool,
    task: &tta_bench::streams::SyntheticTask,
) -> Result<(AdaptiveModel, CheckpointSequence), HarnessError> {
    let spec = ToyModelSpec::parse(model).map_err(HarnessError::Pretrain)?;
    let policy = AugPolicy::parse(policy).map_err(HarnessError::Pretrain)?;
    let cfg = TrainConfig {
        epochs,
        aux_head,
        seed,
        ..Default::default()
    };
    let (m, seq) = train_base(task, spec, policy, &cfg)?;
    eprintln!(
        "pretrained {model}/{} for {epochs} epochs, val accuracy {:.3}",
        seq.policy,
        seq.last().val_accuracy
    );
    Ok((m, seq))
}

fn cmd_pretrain(
    model: String,
    policy: String,
    seed: u64,
    epochs: usize,
    aux_head: bool,
    out: Option<PathBuf>,
) -> Result<(), HarnessError> {
    let task = scenarios::source_task(seed);
    let (_m, seq) = train_checkpoint(&model, &policy, seed, epochs, aux_head, &task)?;
    let path = out.unwrap_or_else(|| {
        output_root(Path::new("runs"))
            .join("checkpoints")
            .join(format!("{}_{}.json", seq.architecture, seq.policy))
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string(&seq).expect("serializable"))?;
    println!("wrote {} checkpoints to {}", seq.checkpoints.len(), path.display());
    Ok(())
}

fn cmd_run(
    config: Option<PathBuf>,
    sets: Vec<String>,
    checkpoint: Option<PathBuf>,
) -> Result<(), HarnessError> {
    let cfg = match config {
        Some(path) => ExperimentConfig::load(&path, &sets)?,
        None => {
            let text = toml::to_string(&ExperimentConfig::default()).expect("serializable");
            ExperimentConfig::parse(&text, &sets)?
        }
    };
    let scenario = scenarios::by_name(&cfg.scenario, cfg.scenario_seed)?;
    let needs_aux = cfg.methods.iter().any(|m| m == "ttt");
    let model = match checkpoint {
        Some(path) => {
            let text = std::fs::read_to_string(&path)?;
            let seq: CheckpointSequence = serde_json::from_str(&text).map_err(|e| {
                HarnessError::Config(format!("bad checkpoint {}: {e}", path.display()))
            })?;
            let spec = ToyModelSpec::parse(&seq.architecture).map_err(HarnessError::Pretrain)?;
            let mut m = spec.build(
                scenario.train_task.input_dim,
                scenario.train_task.class_count,
                needs_aux,
                cfg.scenario_seed ^ 0xA5A5,
            );
            m.restore(&seq.last().state).map_err(|e| {
                HarnessError::Config(format!("checkpoint does not fit {}: {e}", seq.architecture))
            })?;
            m
        }
        None => {
            train_checkpoint(
                &cfg.model,
                &cfg.policy,
                cfg.scenario_seed,
                cfg.pretrain_epochs,
                needs_aux,
                &scenario.train_task,
            )?
            .0
        }
    };
    let records = harness::evaluate(&model, &cfg.model, &scenario, &cfg.eval_settings())?;
    let root = cfg.output_root();
    let path = root.join(format!("{}_records.jsonl", scenario.name));
    harness::persist_records(&records, &path)?;
    let rows = harness::summarize(&records, cfg.domain_uniform);
    print!("{}", harness::summary_table(&rows));
    if let Some((key, note)) = scenario.annotations.iter().next() {
        println!("note ({key}): {note}");
    }
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn cmd_sweep(
    method: String,
    scenario_name: String,
    model_name: String,
    seed: u64,
    protocol: Protocol,
    out_dir: PathBuf,
) -> Result<(), HarnessError> {
    // fail fast on an unknown method before paying for pretraining
    method_meta(&method)?;
    let scenario = scenarios::by_name(&scenario_name, seed)?;
    let (model, _) = train_checkpoint(
        &model_name,
        "standard",
        seed,
        12,
        method == "ttt",
        &scenario.train_task,
    )?;
    let mut spec = scenario.stream.clone();
    spec.seed = seed;
    let stream = tta_bench::streams::build_stream(&spec, &scenario.task)?;
    let base = ProtocolConfig {
        protocol,
        selection: SelectionRule::Last,
        steps: 1,
        learning_rate: 1e-3,
        seed,
    };
    let grid = grid_search(
        &model,
        &method,
        &serde_json::Value::Null,
        &stream,
        &base,
        &LR_GRID,
        &STEPS_GRID,
    )?;
    let root = output_root(&out_dir);
    std::fs::create_dir_all(&root)?;
    let csv_path = root.join(format!("sweep_{method}_{scenario_name}.csv"));
    std::fs::write(&csv_path, grid.to_csv())?;
    let caption = format!("{method} on {scenario_name}; {SENSITIVITY_REFERENCE}");
    let svg = harness::sensitivity_heatmap(&grid, &LR_GRID, &STEPS_GRID, &caption)?;
    let svg_path = root.join(format!("sweep_{method}_{scenario_name}.svg"));
    std::fs::write(&svg_path, svg)?;
    let worst = grid
        .points
        .iter()
        .map(|p| p.mean_accuracy)
        .fold(f64::MAX, f64::min);
    println!(
        "{method} on {scenario_name}: best {:.1}% error (lr {}, {} steps), worst {:.1}% error",
        100.0 * (1.0 - grid.best_accuracy),
        grid.best_learning_rate,
        grid.best_steps,
        100.0 * (1.0 - worst)
    );
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn cmd_report(
    records_path: PathBuf,
    sample_weighted: bool,
    traces: Option<PathBuf>,
) -> Result<(), HarnessError> {
    let records = harness::load_records(&records_path)?;
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let rows = harness::summarize(&records, !sample_weighted);
    print!("{}", harness::summary_table(&rows));
    for (key, note) in &records[0].annotations {
        println!("note ({key}): {note}");
    }
    if let Some(dir) = traces {
        std::fs::create_dir_all(&dir)?;
        for r in &records {
            let stats = harness::trace_stats(r)?;
            let svg = harness::trace_svg(r)?;
            let name = format!("trace_{}_{}_{}.svg", r.method, r.scenario, r.seed);
            std::fs::write(dir.join(&name), svg)?;
            println!(
                "{name}: slope {:+.4}/batch, first->last quintile {:+.1} points",
                stats.slope,
                100.0 * stats.quintile_gap
            );
        }
    }
    Ok(())
}

fn cmd_list_methods() {
    println!(
        "{:<14} {:<14} {:<20} {:<20} updates",
        "method", "resets model", "needs batch stats", "adjusts pretraining"
    );
    for name in METHOD_NAMES {
        let meta = method_meta(name).expect("registered");
        let updates: Vec<&str> = meta.updates.iter().map(|g| g.name()).collect();
        println!(
            "{:<14} {:<14} {:<20} {:<20} {}",
            meta.name,
            if meta.resets_model { "yes" } else { "no" },
            if meta.requires_norm_stats { "yes" } else { "no" },
            if meta.adjusts_pretraining { "yes" } else { "no" },
            if updates.is_empty() { "none".to_string() } else { updates.join(",") }
        );
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { model, policy, seed, epochs, aux_head, out } => {
            cmd_pretrain(model, policy, seed, epochs, aux_head, out)
        }
        Command::Run { config, sets, checkpoint } => cmd_run(config, sets, checkpoint),
        Command::Sweep { method, scenario, model, seed, protocol, out_dir } => {
            cmd_sweep(method, scenario, model, seed, protocol.into(), out_dir)
        }
        Command::Report { records, sample_weighted, traces } => {
            cmd_report(records, sample_weighted, traces)
        }
        Command::ListMethods => {
            cmd_list_methods();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
