use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgiad::blocks::{build_model, Variant};
use mgiad::complexity::{count_weights, emit_table, scaling_probe, sweep_rows, ProbeFamily, TableRow};
use mgiad::config::{ConfigFile, Datasets};
use mgiad::data::Dataset;
use mgiad::oracle::{measure_contraction_from, PoissonProblem};
use mgiad::tensor::{Precision, Scalar};
use mgiad::train::{evaluate, train, Checkpoint, RunOptions};
use mgiad::verify::{run_suite, Suite};
use mgiad::Error;

#[derive(Parser)]
#[command(name = "mgiad", version, about = "Multigrid-in-all-dimensions CNNs: weight analysis, training and self-checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form weight counts of a configuration.
    Analyze(AnalyzeArgs),
    /// Train a model and write the per-epoch log and checkpoints.
    Train(TrainArgs),
    /// Accuracy and loss of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Run a self-check suite.
    Verify(VerifyArgs),
    /// Linear multigrid on a Poisson problem.
    Oracle(OracleArgs),
    /// Print the canonical default configuration of a variant.
    ExportConfig(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant, overriding the file.
    #[arg(long)]
    variant: Option<Variant>,
    /// Dotted `key=value` override, e.g. `--set model.c_K=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    /// Conv weights of one block against width, with a log-log fit.
    Channels,
    /// Table over c_K and g_s for the configured model.
    Groups,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Per-operator breakdown instead of the summary row.
    #[arg(long)]
    detail: bool,
    #[arg(long, value_enum)]
    sweep: Option<Sweep>,
    /// Widths of the channel sweep.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    widths: Vec<usize>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset: synth, cifar10, cifar100 or fashionmnist.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Keep the first n training samples.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory for log.csv, checkpoints and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Independent repetitions with consecutive seeds.
    #[arg(long)]
    runs: Option<usize>,
    /// Do not echo log rows to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to load; without it the freshly initialized model is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradcheck, matrix, sharing or hierarchy.
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Problem {
    Poisson1d,
    Poisson2d,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum)]
    problem: Problem,
    /// Interior points per axis (default 63 in 1-D, 15 in 2-D).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    omega: f64,
    #[arg(long, default_value_t = 1)]
    pre: usize,
    #[arg(long, default_value_t = 1)]
    post: usize,
    #[arg(long, default_value_t = 12)]
    cycles: usize,
    /// Start from the exact solution.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value = "mgiad")]
    variant: Variant,
}

/// Nonzero exits: 1 for failed checks and runs, 2 for usage and configuration errors.
enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) | Error::NotFound(_) | Error::Parse { .. } | Error::TooLarge { .. } => {
                Failure::Usage(e.to_string())
            }
            Error::Numerical(_) | Error::Io(_) | Error::Csv(_) => Failure::Check(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Check(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Verify(a) => verify(a),
        Command::Oracle(a) => oracle(a),
        Command::ExportConfig(a) => {
            say(&ConfigFile::preset(a.variant).to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &ConfigArgs, extra: Vec<(String, String)>) -> Result<ConfigFile, Failure> {
    let (text, source) = match &args.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => (t, path.display().to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Failure::Usage(format!("config not found: {}", path.display())))
            }
            Err(e) => return Err(e.into()),
        },
        None => (String::new(), "defaults".to_string()),
    };
    let mut overrides = Vec::new();
    if let Some(v) = args.variant {
        overrides.push(("model.variant".to_string(), format!("\"{v}\"")));
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    overrides.extend(extra);
    Ok(ConfigFile::parse_with(&text, &source, &overrides)?)
}

fn quoted(s: &str) -> String {
    format!("{s:?}")
}

fn data_overrides(d: &DataArgs) -> Vec<(String, String)> {
    let mut v = Vec::new();
    if let Some(kind) = &d.data {
        v.push(("data.kind".into(), quoted(kind)));
    }
    if let Some(dir) = &d.data_dir {
        v.push(("data.dir".into(), quoted(&dir.display().to_string())));
    }
    if let Some(n) = d.subset {
        v.push(("data.subset".into(), n.to_string()));
    }
    if let Some(s) = d.seed {
        v.push(("run.seed".into(), s.to_string()));
    }
    v
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => say(text),
    }
    Ok(())
}

/// Writes to stdout. A closed pipe (`mgiad ... | head`) is not an error.
fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: cannot write to stdout: {e}");
        }
    }
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let cfg = load_config(&a.cfg, Vec::new())?;
    let text = match a.sweep {
        Some(Sweep::Channels) => {
            let mut points = String::from("family,width,weights\n");
            let mut fits = String::from("family,exponent,intercept\n");
            for (name, family) in [
                ("dense", ProbeFamily::DenseMgnet),
                ("sic", ProbeFamily::Sic { group_size: 4, coarsest: 4 }),
                ("depthwise", ProbeFamily::Depthwise),
            ] {
                let fit = scaling_probe(family, &a.widths)?;
                for (c, w) in &fit.points {
                    points.push_str(&format!("{name},{c},{w}\n"));
                }
                fits.push_str(&format!("{name},{:.4},{:.4}\n", fit.exponent, fit.intercept));
            }
            format!("{points}\n{fits}")
        }
        Some(Sweep::Groups) => {
            let rows = sweep_rows(&cfg.model, &[4, 8, 16, 32, 64], &[2, 4, 8, 16, 32, 64]);
            emit_table(&rows)?
        }
        None if a.detail => {
            let b = count_weights(&cfg.model)?;
            let mut s = String::from("name,role,level,kappa,weights\n");
            for r in &b.records {
                s.push_str(&format!("{},{},{},{},{}\n", r.name, r.role, r.level, r.kappa, r.count));
            }
            s.push_str(&format!("total,,,,{}\n", b.total()));
            s
        }
        None => emit_table(&[TableRow::from_config(&cfg.model)?])?,
    };
    emit(a.out.as_deref(), &text)
}

fn load_data(cfg: &ConfigFile) -> Result<Datasets, Failure> {
    Ok(cfg.data.load(cfg.run.seed)?)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut extra = data_overrides(&a.data);
    if let Some(e) = a.epochs {
        extra.push(("train.epochs".into(), e.to_string()));
    }
    if let Some(b) = a.batch_size {
        extra.push(("train.batch_size".into(), b.to_string()));
    }
    if let Some(lr) = a.lr {
        extra.push(("train.lr".into(), format!("{lr:?}")));
    }
    if let Some(out) = &a.out {
        extra.push(("run.out_dir".into(), quoted(&out.display().to_string())));
    }
    if let Some(r) = a.runs {
        extra.push(("run.runs".into(), r.to_string()));
    }
    let cfg = load_config(&a.cfg, extra)?;
    let data = load_data(&cfg)?;
    let model = cfg.model_for(&data.train);
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    std::fs::write(cfg.run.out_dir.join("config.toml"), cfg.to_toml())?;
    let mut failed = Vec::new();
    for k in 0..cfg.run.runs {
        let seed = cfg.run.seed + k as u64;
        let dir = if cfg.run.runs == 1 {
            cfg.run.out_dir.clone()
        } else {
            cfg.run.out_dir.join(format!("run-{}", k + 1))
        };
        let run = RunOptions {
            seed,
            augment: cfg.data.augmentation(),
            out_dir: Some(dir),
            stop_at_train_acc: None,
        };
        let aborted = match cfg.run.precision {
            Precision::Single => run_training::<f32>(&cfg, &model, &data, &run, a.quiet)?,
            Precision::Double => run_training::<f64>(&cfg, &model, &data, &run, a.quiet)?,
        };
        if let Some(reason) = aborted {
            failed.push(format!("run {} (seed {seed}): {reason}", k + 1));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join("; ")))
    }
}

fn run_training<T: Scalar>(
    cfg: &ConfigFile,
    model: &mgiad::blocks::ModelConfig,
    data: &Datasets,
    run: &RunOptions,
    quiet: bool,
) -> Result<Option<String>, Failure> {
    let mut net = build_model::<T>(model, run.seed)?;
    if !quiet {
        say(&format!("{}\n", mgiad::train::LOG_HEADER));
    }
    let log = train(&mut net, &data.train, Some(&data.test), &cfg.train, run, |r| {
        if !quiet {
            say(&format!("{}\n", r.csv_row()));
        }
    })?;
    if let Some(last) = log.records.last() {
        eprintln!(
            "trained {} epochs: train acc {:.4}, test acc {}",
            log.records.len(),
            last.train_acc,
            last.test_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(log.aborted)
}

fn evaluate_cmd(a: EvaluateArgs) -> Outcome {
    let cfg = load_config(&a.cfg, data_overrides(&a.data))?;
    let data = load_data(&cfg)?;
    let ds = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Test => &data.test,
    };
    let model = cfg.model_for(ds);
    let eval = match cfg.run.precision {
        Precision::Single => evaluate_with::<f32>(&model, cfg.run.seed, a.checkpoint.as_deref(), ds, cfg.train.batch_size)?,
        Precision::Double => evaluate_with::<f64>(&model, cfg.run.seed, a.checkpoint.as_deref(), ds, cfg.train.batch_size)?,
    };
    say(&format!("accuracy,loss\n{},{}\n", eval.accuracy, eval.loss));
    Ok(())
}

fn evaluate_with<T: Scalar>(
    model: &mgiad::blocks::ModelConfig,
    seed: u64,
    checkpoint: Option<&Path>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<mgiad::train::Evaluation, Failure> {
    let mut net = build_model::<T>(model, seed)?;
    if let Some(path) = checkpoint {
        Checkpoint::load(path)?.restore(net.store_mut())?;
    }
    Ok(evaluate(&net, ds, batch_size)?)
}

fn verify(a: VerifyArgs) -> Outcome {
    let suite: Suite = a.suite.parse()?;
    let report = run_suite(suite, a.seed)?;
    say(&report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} suite failed", report.suite)))
    }
}

fn oracle(a: OracleArgs) -> Outcome {
    let (dim, default_n) = match a.problem {
        Problem::Poisson1d => (1, 63),
        Problem::Poisson2d => (2, 15),
    };
    let problem = PoissonProblem::random(dim, a.n.unwrap_or(default_n), a.seed)?;
    let start = a.exact.then(|| problem.exact.clone());
    let report = measure_contraction_from(&problem, a.levels, a.omega, a.pre, a.post, a.cycles, start.as_ref())?;
    say(&report.to_csv());
    say(&format!(
        "# {} levels={} omega={} contraction={:.6}\n",
        report.problem, report.levels, report.omega, report.contraction
    ));
    Ok(())
}
