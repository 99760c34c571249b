//! `neural-cache` command-line front end.
//!
//! Exit codes: 0 on success, 1 on validation or configuration errors, 2 on
//! runtime failures.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use neural_cache::config::{CONFIG_KEYS, DATA_DIR_ENV};
use neural_cache::dataset::{dataset_stats, load_dataset};
use neural_cache::io::{read_to_string, write_atomic};
use neural_cache::metrics::RunMetrics;
use neural_cache::simulator::{run, run_sweep, RunRecord};
use neural_cache::synth::{check_calibration, generate, SynthSpec};
use neural_cache::{Dataset, ExperimentConfig, SoftmaxLearner, StudentModel, SweepReport};

/// Configuration error raised by the CLI itself.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn config_keys_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (TOML; override any with --set key=value):\n");
        for (key, doc) in CONFIG_KEYS {
            s.push_str(&format!("  {key:<width$}  {doc}\n"));
        }
        s.push_str(&format!(
            "\nRelative dataset paths resolve against ${DATA_DIR_ENV}.\n"
        ));
        s.push_str("Exit codes: 0 success, 1 validation/config error, 2 runtime failure.");
        s
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "neural-cache",
    version,
    about = "Replay simulator for budgeted teacher/student request routing"
)]
#[command(after_help = config_keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate a dataset directory, then print its statistics.
    Validate { dir: PathBuf },
    /// Print teacher statistics of a dataset directory.
    Stats {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run one (policy, budget, seed) cell.
    Run(RunArgs),
    /// Run every (policy, budget, seed) cell of a config.
    Sweep(SweepArgs),
    /// Summarize a sweep directory, optionally against a baseline sweep.
    Report {
        /// Sweep output directory holding report.json.
        #[arg(long)]
        from: PathBuf,
        /// Sweep without oracle filtering; writes oracle_deltas.json into --from.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Check a synthetic dataset's teacher calibration, optionally generating it first.
    SynthCheck {
        dir: PathBuf,
        /// Generate the dataset into DIR from this TOML spec before checking.
        #[arg(long)]
        generate: Option<PathBuf>,
        /// Target teacher accuracy; defaults to the spec's when generating.
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set retrain_frequency=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset directory; takes precedence over the config's `dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, short)]
    out: PathBuf,
    /// Policy label; defaults to the first policy.
    #[arg(long)]
    policy: Option<String>,
    /// Defaults to the first configured budget.
    #[arg(long)]
    budget: Option<f64>,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, short)]
    out: PathBuf,
    /// Parallel cells; 0 uses every available core.
    #[arg(long, default_value_t = 0, env = "NEURAL_CACHE_JOBS")]
    jobs: usize,
}

fn load_config(args: &ConfigArgs) -> Result<(ExperimentConfig, Dataset)> {
    let text = read_to_string(&args.config)?;
    let cfg = ExperimentConfig::from_toml_with_overrides(&text, &args.overrides)
        .with_context(|| format!("in config file {}", args.config.display()))?;
    let path = match &args.dataset {
        Some(p) => p.clone(),
        None => cfg.dataset_path().ok_or_else(|| {
            invalid(format!(
                "config key `dataset` is required (in {})",
                args.config.display()
            ))
        })?,
    };
    let dataset =
        load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok((cfg, dataset))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_trace(dir: &Path, record: &RunRecord<StudentModel>) -> Result<()> {
    let traces = dir.join("traces");
    create_dir(&traces)?;
    let path = traces.join(format!("{}.jsonl", record.cell_key()));
    write_atomic(&path, &record.trace_jsonl()?)?;
    Ok(())
}

fn cmd_validate(dir: &Path) -> Result<()> {
    let ds = load_dataset(dir)?;
    print!("{}", dataset_stats(&ds));
    Ok(())
}

fn cmd_stats(dir: &Path, json: bool) -> Result<()> {
    let stats = dataset_stats(&load_dataset(dir)?);
    if json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{stats}");
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (cfg, dataset) = load_config(&args.config)?;
    let policy = match &args.policy {
        Some(label) => cfg
            .policy
            .iter()
            .find(|p| &p.label() == label)
            .ok_or_else(|| invalid(format!("no policy labelled `{label}` in the config")))?,
        None => &cfg.policy[0],
    };
    let budget = args.budget.unwrap_or(cfg.budgets[0]);
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let rc = cfg.run_config(policy, budget, seed);
    let record = run(&dataset, &rc, &SoftmaxLearner::new(cfg.train.clone()))?;
    let metrics = RunMetrics::compute(&record, &dataset, cfg.include_warmup_in_online)?;

    create_dir(&args.out)?;
    write_trace(&args.out, &record)?;
    let summary =
        serde_json::json!({ "config": rc, "metrics": metrics, "retrains": record.retrains });
    write_atomic(
        &args.out.join("run.json"),
        (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(),
    )?;
    record.final_model.save(&args.out.join("student.json"))?;
    println!(
        "{} budget {budget} seed {seed}: online {:.4}, final {}, {} teacher calls",
        record.policy,
        metrics.online_accuracy,
        metrics
            .final_accuracy
            .map_or_else(|| "-".into(), |f| format!("{f:.4}")),
        metrics.teacher_calls
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let (cfg, dataset) = load_config(&args.config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .context("building the worker pool")?;
    let learner = SoftmaxLearner::new(cfg.train.clone());
    let cells = pool.install(|| run_sweep(&dataset, &cfg, &learner))?;
    let report = SweepReport::from_cells(dataset.name(), &cfg, &cells)?;

    create_dir(&args.out)?;
    for cell in &cells {
        write_trace(&args.out, &cell.record)?;
    }
    report.save(&args.out.join("report.json"))?;
    write_atomic(&args.out.join("curves.csv"), report.curves_csv().as_bytes())?;
    write_atomic(&args.out.join("cells.csv"), report.cells_csv().as_bytes())?;
    write_atomic(&args.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    print!("{}", report.summary_table());
    Ok(())
}

fn cmd_report(from: &Path, baseline: Option<&Path>) -> Result<()> {
    let mut report = SweepReport::load(&from.join("report.json"))?;
    if let Some(base_dir) = baseline {
        let base = SweepReport::load(&base_dir.join("report.json"))?;
        report.oracle_deltas = report.oracle_deltas_against(&base).map_err(|e| {
            invalid(format!(
                "cannot compare {} with {}: {e}",
                from.display(),
                base_dir.display()
            ))
        })?;
        let json = serde_json::to_string_pretty(&report.oracle_deltas)? + "\n";
        write_atomic(&from.join("oracle_deltas.json"), json.as_bytes())?;
    }
    println!("dataset {}", report.dataset);
    print!("{}", report.summary_table());
    Ok(())
}

fn cmd_synth_check(
    dir: &Path,
    spec_path: Option<&Path>,
    target: Option<f64>,
    tolerance: f64,
) -> Result<()> {
    let mut target = target;
    if let Some(path) = spec_path {
        let spec: SynthSpec = toml::from_str(&read_to_string(path)?)
            .map_err(|e| invalid(format!("{}: {}", path.display(), e.message())))?;
        let dataset = generate(&spec)?;
        create_dir(dir)?;
        dataset.save(dir)?;
        target.get_or_insert(spec.teacher_accuracy);
    }
    let target =
        target.ok_or_else(|| invalid("--target is required unless --generate is given"))?;
    let report = check_calibration(&load_dataset(dir)?, target, tolerance)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed() {
        return Err(invalid(format!(
            "calibration check failed: accuracy {:.4} vs target {target} ± {tolerance}, margins ok: {}",
            report.realized_accuracy, report.margins_ok
        )));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<Invalid>().is_some()
            || e.downcast_ref::<neural_cache::Error>()
                .is_some_and(|e| e.is_validation())
    });
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Validate { dir } => cmd_validate(dir),
        Command::Stats { dir, json } => cmd_stats(dir, *json),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report { from, baseline } => cmd_report(from, baseline.as_deref()),
        Command::SynthCheck {
            dir,
            generate,
            target,
            tolerance,
        } => cmd_synth_check(dir, generate.as_deref(), *target, *tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
