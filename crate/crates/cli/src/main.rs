use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use fedpower::accountant::{
    compose, default_orders, effective_rate, rdp_to_dp, required_sigma, step_rdp, AccountantState,
};
use fedpower::factorize::{factorize, reconstruction_error, Method};
use fedpower::fl::{run_experiment, FLRunConfig, SyntheticTask};
use fedpower::harness::{self, AttackKind, MiaOptions, SavedRun, SweepAxis, SweepOptions, SweepValue};
use fedpower::linalg::{fpmx, frobenius_norm, RngStream};
use fedpower::Adjacency;

#[derive(Parser)]
#[command(name = "fedpower", version, about = "Private federated LoRA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run(RunArgs),
    /// Run a configuration over a grid of values and seeds.
    Sweep(SweepArgs),
    /// Membership inference against a finished run.
    Attack(AttackArgs),
    /// Rank-r factorization of an FPMX matrix.
    Factorize(FactorizeArgs),
    /// Noise multiplier for a budget, with the per-order RDP table as CSV.
    Accountant(AccountantArgs),
    /// Merge run directories into one long-format table.
    Report(ReportArgs),
    /// Print a named preset as TOML.
    Preset { name: String },
}

#[derive(Args)]
struct ConfigSource {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (nonprivate, eps9, eps6, eps3).
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<FLRunConfig, Failure> {
        match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(Failure::config)?;
                FLRunConfig::from_toml(&text).map_err(Failure::from)
            }
            (None, Some(name)) => harness::preset(name).map_err(Failure::from),
            (None, None) => Err(Failure::config(anyhow::anyhow!(
                "pass --config <file> or --preset <name>"
            ))),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Output directory; defaults to `$FEDPOWER_OUT/<protocol>-seed<k>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `task.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `training.rounds`.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// epsilon, refactor_frequency or protocol.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. `9,6,3,none` or `1,5,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Comma-separated seeds; defaults to the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Accuracy level for the bits-to-target column.
    #[arg(long)]
    target: Option<f64>,
    /// Also run FedLoRA on each seed for relative overhead.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Directory written by `run`.
    #[arg(long)]
    model: PathBuf,
    /// shadow, loss, calibration or all.
    #[arg(long, default_value = "all")]
    attack: String,
    #[arg(long, default_value_t = fedpower::attacks::DEFAULT_SHADOWS)]
    shadows: usize,
    /// Members (and non-members) in the evaluation set.
    #[arg(long, default_value_t = 500)]
    eval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write results; defaults to the model directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FactorizeArgs {
    /// Input matrix in FPMX format.
    input: PathBuf,
    /// power, powerdp, input or output.
    #[arg(long, default_value = "powerdp")]
    method: String,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = fedpower::factorize::DEFAULT_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Norm bound of the input; required when sigma > 0.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving `a.fpmx` and `b.fpmx`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AccountantArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long)]
    q_c: f64,
    #[arg(long, default_value_t = 1.0)]
    q_s: f64,
    /// Number of rounds.
    #[arg(long)]
    rounds: u64,
    /// sample or client.
    #[arg(long, default_value = "sample")]
    adjacency: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories.
    dirs: Vec<PathBuf>,
    /// Directory receiving `report.csv` and `report.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<fedpower::Error> for Failure {
    fn from(e: fedpower::Error) -> Self {
        if e.is_config() {
            Failure::config(e)
        } else {
            Failure::runtime(e)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e)
    }
}

fn out_root() -> PathBuf {
    std::env::var_os("FEDPOWER_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::runtime)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut config = args.source.load()?;
    if let Some(seed) = args.seed {
        config.task.seed = seed;
    }
    if let Some(t) = args.rounds {
        config.training.rounds = t;
    }
    let seed = config.task.seed;
    let dir = args
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| out_root().join(format!("{}-seed{seed}", config.protocol.name)));
    let (_, out) = run_experiment(&config)?;
    let summary = harness::write_run(&dir, &config, seed, &out)?;
    println!(
        "{}: final accuracy {:.4} (base {:.4}), sigma {:.4}, certified epsilon {}, {} bits -> {}",
        summary.protocol,
        summary.final_accuracy,
        summary.base_accuracy,
        summary.sigma,
        summary
            .certified_epsilon
            .map_or("unbounded".into(), |e| format!("{e:.4}")),
        summary.total_bits,
        dir.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut config = args.source.load()?;
    if let Some(t) = args.rounds {
        config.training.rounds = t;
    }
    let axis: SweepAxis = args.axis.parse()?;
    let values = args
        .values
        .iter()
        .map(|v| SweepValue::parse(axis, v))
        .collect::<fedpower::Result<Vec<_>>>()?;
    let seeds = if args.seeds.is_empty() {
        if config.seeds.is_empty() {
            vec![config.task.seed]
        } else {
            config.seeds.clone()
        }
    } else {
        args.seeds
    };
    let root = args.out.unwrap_or_else(|| out_root().join("sweep"));
    let options = SweepOptions {
        target_accuracy: args.target,
        baseline: args.baseline,
        out_root: Some(root.join("runs")),
    };
    let report = harness::sweep(&config, &values, &seeds, &options);
    let csv = report.to_csv()?;
    write(&root.join("sweep.csv"), &csv)?;
    write(
        &root.join("sweep.json"),
        serde_json::to_vec_pretty(&report).map_err(Failure::runtime)?,
    )?;
    print!("{csv}");
    for f in &report.failures {
        eprintln!("warning: {} seed {} failed: {}", f.label, f.seed, f.error);
    }
    if report.runs.is_empty() && !report.failures.is_empty() {
        return Err(Failure::runtime(anyhow::anyhow!("every run of the sweep failed")));
    }
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> Result<(), Failure> {
    let kinds: Vec<AttackKind> = match args.attack.as_str() {
        "all" => AttackKind::ALL.to_vec(),
        "shadow" => vec![AttackKind::Shadow],
        "loss" => vec![AttackKind::Loss],
        "calibration" => vec![AttackKind::Calibration],
        other => {
            return Err(Failure::config(anyhow::anyhow!(
                "unknown attack {other:?} (expected shadow, loss, calibration, all)"
            )))
        }
    };
    let saved = SavedRun::load(&args.model).map_err(|e| match e {
        fedpower::Error::Io { .. } => Failure::config(e),
        other => Failure::from(other),
    })?;
    let task = SyntheticTask::generate(&saved.config.task)?;
    let options = MiaOptions {
        shadows: args.shadows,
        eval_count: args.eval,
        seed: args.seed,
        ..Default::default()
    };
    let report = harness::run_mia(&saved.config, &task, &saved.weight(), &kinds, &options)?;

    let dir = args.out.unwrap_or(saved.dir.clone());
    let mut csv = String::from("attack,id,is_member,score\n");
    for o in &report.outcomes {
        for ((id, m), s) in report.eval_ids.iter().zip(&o.result.members).zip(&o.result.scores) {
            csv.push_str(&format!("{},{id},{m},{s:?}\n", o.attack.as_str()));
        }
    }
    write(&dir.join("attack.csv"), csv)?;
    let summary: Vec<serde_json::Value> = report
        .outcomes
        .iter()
        .map(|o| {
            serde_json::json!({
                "attack": o.attack.as_str(),
                "accuracy": o.result.accuracy,
                "auc": o.result.auc,
                "threshold": o.result.threshold,
                "tpr": o.result.tpr,
                "fpr": o.result.fpr,
                "flagged": o.result.flagged,
                "roc": o.result.roc,
            })
        })
        .collect();
    write(
        &dir.join("attack_summary.json"),
        serde_json::to_vec_pretty(&summary).map_err(Failure::runtime)?,
    )?;
    for o in &report.outcomes {
        println!(
            "{}: accuracy {:.4}, auc {:.4}",
            o.attack.as_str(),
            o.result.accuracy,
            o.result.auc
        );
    }
    Ok(())
}

fn cmd_factorize(args: FactorizeArgs) -> Result<(), Failure> {
    let method: Method = args.method.parse()?;
    let w = fpmx::load(&args.input).map_err(|e| match e {
        fedpower::Error::Io { .. } | fedpower::Error::Format(_) => Failure::config(e),
        other => Failure::from(other),
    })?;
    let clip = match args.clip {
        Some(c) => c,
        None if args.sigma > 0.0 || method == Method::Output => {
            return Err(Failure::config(anyhow::anyhow!("--clip is required with noise")))
        }
        None => frobenius_norm(&w).max(f64::MIN_POSITIVE),
    };
    let f = factorize(
        method,
        &w,
        args.rank,
        args.iters,
        args.sigma,
        clip,
        &RngStream::new(args.seed),
    )?;
    fs::create_dir_all(&args.out)?;
    fpmx::save(f.pair.a(), args.out.join("a.fpmx"))?;
    fpmx::save(f.pair.b(), args.out.join("b.fpmx"))?;
    println!(
        "reconstruction error {:.6e}, deficient directions {}",
        reconstruction_error(&w, &f.pair),
        f.deficient
    );
    Ok(())
}

fn cmd_accountant(args: AccountantArgs) -> Result<(), Failure> {
    let adjacency = match args.adjacency.as_str() {
        "sample" => Adjacency::Sample,
        "client" => Adjacency::Client,
        other => {
            return Err(Failure::config(anyhow::anyhow!(
                "unknown adjacency {other:?} (expected sample, client)"
            )))
        }
    };
    let q = effective_rate(adjacency, args.q_c, args.q_s);
    let orders = default_orders();
    let sigma = required_sigma(args.epsilon, args.delta, q, args.rounds, &orders)?;
    let step = step_rdp(sigma, q, &orders)?;
    let state = compose(&AccountantState::new(orders.clone()), &step, args.rounds)?;
    let loss = rdp_to_dp(&state, args.delta)?;
    println!(
        "# sigma={sigma} q={q} rounds={} certified_epsilon={}",
        args.rounds, loss.epsilon
    );
    println!("order,rdp_step,rdp_total,epsilon");
    let log_inv_delta = (1.0 / args.delta).ln();
    for ((a, s), t) in orders.iter().zip(&step.rdp).zip(&state.rdp) {
        println!("{a},{s:e},{t:e},{:e}", t + log_inv_delta / (a - 1.0));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let report = harness::report(&args.dirs);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write(&args.out.join("report.csv"), report.to_csv()?)?;
    write(&args.out.join("report.json"), report.to_json()?)?;
    println!("{} rows from {} runs", report.rows.len(), report.summaries.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Factorize(a) => cmd_factorize(a),
        Command::Accountant(a) => cmd_accountant(a),
        Command::Report(a) => cmd_report(a),
        Command::Preset { name } => harness::preset(&name)
            .and_then(|p| p.to_toml())
            .map(|t| print!("{t}"))
            .map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
