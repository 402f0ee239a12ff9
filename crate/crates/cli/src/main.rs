mod compare;
mod report;

use std::env;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use zslbench::data::{generate_synthetic, load_dataset, load_split, save_dataset, SyntheticSpec};
use zslbench::eval::Mode;
use zslbench::registry::{cross_dataset, run, Grid, MethodId, RunOptions};
use zslbench::{Scalar, ZslError};

use report::{Clock, RunReport};

/// Zero-shot learning benchmark.
#[derive(Parser)]
#[command(name = "zslbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune, fit and evaluate one method on one dataset split.
    Run(RunArgs),
    /// Run a plan of methods over several observations and rank them.
    Compare(CompareArgs),
    /// Generate a synthetic dataset and split.
    Synth(SynthArgs),
    /// Train on one dataset and evaluate on another.
    Cross(CrossArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long)]
    method: MethodId,
    #[arg(long, default_value = "zsl")]
    mode: Mode,
    /// TOML table of hyperparameter names to values or value lists.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<usize>,
    /// Report path; a CSV summary is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Grid points evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Keep the model fitted on the training classes only.
    #[arg(long)]
    no_retrain: bool,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[command(flatten)]
    common: MethodArgs,
}

#[derive(Args)]
struct CrossArgs {
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long)]
    train_split: PathBuf,
    #[arg(long)]
    test_split: PathBuf,
    #[command(flatten)]
    common: MethodArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Bad invocation; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Resolves a relative path against the working directory, falling back to
/// `$ZSLBENCH_DATA` when it does not exist there.
pub(crate) fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = env::var_os("ZSLBENCH_DATA") {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

/// Reads a grid file: each key maps to a number or a list of numbers.
pub(crate) fn read_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let number = |key: &str, v: &toml::Value| -> Result<f64> {
        match v {
            toml::Value::Integer(i) => Ok(*i as f64),
            toml::Value::Float(x) => Ok(*x),
            other => Err(Usage(format!("{}: `{key}` has non-numeric value {other}", path.display())).into()),
        }
    };
    let mut grid = Grid::new();
    for (key, value) in &table {
        let values = match value {
            toml::Value::Array(items) => items.iter().map(|v| number(key, v)).collect::<Result<Vec<_>>>()?,
            v => vec![number(key, v)?],
        };
        if values.is_empty() {
            return Err(Usage(format!("{}: `{key}` has no values", path.display())).into());
        }
        grid.insert(key.clone(), values);
    }
    Ok(grid)
}

fn options(args: &MethodArgs) -> Result<RunOptions> {
    args.method.check_mode(args.mode).map_err(|e| Usage(e.to_string()))?;
    if args.k.is_empty() || args.k.contains(&0) {
        return Err(Usage("--k values must be positive".into()).into());
    }
    if args.jobs == 0 {
        return Err(Usage("--jobs must be positive".into()).into());
    }
    let grid = args.grid.as_deref().map(|p| read_grid(&resolve(p))).transpose()?;
    Ok(RunOptions {
        method: args.method,
        mode: args.mode,
        grid,
        seed: args.seed,
        ks: args.k.clone(),
        retrain: !args.no_retrain,
        jobs: args.jobs,
    })
}

fn write_outputs(out: &Path, report: &RunReport) -> Result<()> {
    report::write_json(out, report)?;
    report::write_summary(&out.with_extension("csv"), std::slice::from_ref(report))
}

fn exec_run<T: Scalar>(args: &RunArgs) -> Result<()> {
    let opts = options(&args.common)?;
    let clock = Clock::start();
    let ds = load_dataset::<T>(&resolve(&args.manifest))?;
    let split = load_split(&resolve(&args.split), &ds.labels, ds.n_classes())?;
    let outcome = run(&ds, &split, &opts)?;
    let grid = opts.grid.clone().unwrap_or_else(|| opts.method.default_grid());
    let c = &args.common;
    let report = RunReport::new(
        c.method.as_str(),
        c.mode,
        c.seed,
        &c.precision.to_string(),
        opts.retrain,
        grid,
        outcome,
        clock.stop(),
    );
    write_outputs(&c.out, &report)
}

fn exec_cross<T: Scalar>(args: &CrossArgs) -> Result<()> {
    let opts = options(&args.common)?;
    let clock = Clock::start();
    let train = load_dataset::<T>(&resolve(&args.train_manifest))?;
    let test = load_dataset::<T>(&resolve(&args.test_manifest))?;
    let train_split = load_split(&resolve(&args.train_split), &train.labels, train.n_classes())?;
    let test_split = load_split(&resolve(&args.test_split), &test.labels, test.n_classes())?;
    let outcome = cross_dataset(&train, &train_split, &test, &test_split, &opts)?;
    let grid = opts.grid.clone().unwrap_or_else(|| opts.method.default_grid());
    let c = &args.common;
    let report = RunReport::new(
        c.method.as_str(),
        c.mode,
        c.seed,
        &c.precision.to_string(),
        opts.retrain,
        grid,
        outcome,
        clock.stop(),
    );
    write_outputs(&c.out, &report)
}

fn exec_synth(args: &SynthArgs) -> Result<()> {
    let path = resolve(&args.spec);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let spec: SyntheticSpec = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let (ds, split) = generate_synthetic::<f64>(&spec)?;
    let manifest = save_dataset(&ds, &args.out)?;
    let split_path = args.out.join("split.toml");
    split.save(&split_path)?;
    println!("{}", json!({ "manifest": manifest, "split": split_path }));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => match a.common.precision {
            Precision::F32 => exec_run::<f32>(a),
            Precision::F64 => exec_run::<f64>(a),
        },
        Command::Cross(a) => match a.common.precision {
            Precision::F32 => exec_cross::<f32>(a),
            Precision::F64 => exec_cross::<f64>(a),
        },
        Command::Compare(a) => {
            if a.jobs == 0 {
                return Err(Usage("--jobs must be positive".into()).into());
            }
            match a.precision {
                Precision::F32 => compare::exec::<f32>(&a.plan, &a.out, a.jobs, "f32"),
                Precision::F64 => compare::exec::<f64>(&a.plan, &a.out, a.jobs, "f64"),
            }
        }
        Command::Synth(a) => exec_synth(a),
    }
}

fn report_error(kind: &str, message: &str, chain: Vec<String>) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message, "chain": chain } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let message = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            report_error("usage", message, text.lines().skip(1).filter(|l| !l.is_empty()).map(str::to_string).collect());
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let chain: Vec<String> = err.chain().skip(1).map(|e| e.to_string()).collect();
            if err.downcast_ref::<Usage>().is_some() {
                report_error("usage", &err.to_string(), chain);
                return ExitCode::from(2);
            }
            let kind = err.chain().find_map(|e| e.downcast_ref::<ZslError>()).map_or("other", ZslError::kind);
            report_error(kind, &err.to_string(), chain);
            ExitCode::FAILURE
        }
    }
}
