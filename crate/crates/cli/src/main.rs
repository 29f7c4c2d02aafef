//! `xreg`: train, predict, evaluate and self-test extreme regression models.

mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use xreg::data::{read_dataset, read_predictions, write_predictions, Orientation, PredictionFile};
use xreg::labelwise::predict_labelwise;
use xreg::metrics::{Evaluation, Metric, PropensityModel};
use xreg::model::{load_model, save_model, Hyperparams};
use xreg::pointwise::predict_pointwise;
use xreg::selftest::{off_by_one_xmad, run_all, SelftestConfig, XmadFn};
use xreg::solver::SolverParams;
use xreg::tail::{rerank_label, rerank_scaled, unit_point};
use xreg::train::train;

const SUBCOMMANDS: [&str; 4] = ["train", "predict", "evaluate", "selftest"];

#[derive(Parser, Debug)]
#[command(name = "xreg", version, about = "Extreme regression over large sparse label spaces")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads [default: all cores]; 1 gives single-core timings.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// key=value file supplying any long flag; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write it to disk.
    Train(TrainArgs),
    /// Score a test file with a trained model.
    Predict(PredictArgs),
    /// Compare a prediction file against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the randomized property suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Training data ("N D L" header, then "labels features" lines).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output model path.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Number of trees in the ensemble (T).
    #[arg(long, default_value_t = 3)]
    trees: usize,
    /// Maximum labels per leaf (M).
    #[arg(long, default_value_t = 100)]
    max_leaf: usize,
    /// Regularization weight of every node regressor (C).
    #[arg(long = "c", default_value_t = 10.0)]
    c: f64,
    /// Solver stopping tolerance on the largest dual gradient.
    #[arg(long, default_value_t = 0.1)]
    tol: f64,
    /// Solver epoch limit.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Drop regressor weights with magnitude below this.
    #[arg(long, default_value_t = 0.05)]
    prune: f64,
    /// Random seed; identical seeds give byte-identical models.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Pointwise,
    Labelwise,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Test data in the training format; labels, if any, are ignored.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output prediction file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Rank labels per point, or points per label.
    #[arg(long, value_enum, default_value_t = Mode::Pointwise)]
    mode: Mode,
    /// Pointwise beam width (P).
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// Pointwise labels kept per point (k).
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// Labelwise routing factor over training visit fractions (F).
    #[arg(long, default_value_t = 4.0)]
    factor: f64,
    /// Labelwise points kept per label (N).
    #[arg(long, default_value_t = 10)]
    per_label: usize,
    /// Blend weight of the model against tail-centroid similarity; 1 leaves scores unchanged.
    #[arg(long, value_name = "ALPHA")]
    tail_alpha: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OrientationArg {
    Auto,
    Pointwise,
    Labelwise,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Table,
    Csv,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvaluateArgs {
    /// Ground-truth test data.
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
    /// Prediction file to score.
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Training data, for label propensities (needed by PSP).
    #[arg(long, value_name = "FILE")]
    train: Option<PathBuf>,
    /// Comma-separated metrics: xmad,xrmse,mad,rmse,wp,wpregret,psp,ndcg,tau,auprc.
    #[arg(long, value_delimiter = ',', default_value = "psp,tau,xmad")]
    metrics: Vec<String>,
    /// Comma-separated cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    k: Vec<usize>,
    /// Prediction orientation; inferred from the file header by default.
    #[arg(long, value_enum, default_value_t = OrientationArg::Auto)]
    orientation: OrientationArg,
    /// Propensity parameter A.
    #[arg(long, default_value_t = PropensityModel::DEFAULT_A)]
    prop_a: f64,
    /// Propensity parameter B.
    #[arg(long, default_value_t = PropensityModel::DEFAULT_B)]
    prop_b: f64,
    /// Also count rows violating 0 ≤ WP-regret@k ≤ 2·XMAD@2k.
    #[arg(long)]
    check_lemma1: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Fault {
    XmadOffByOne,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SelftestArgs {
    /// Random instances for the metric suite; the tree suites scale from it.
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Substitute a known-broken component to check the suites notice.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

/// Distinguishes invalid input (exit 2) from runtime failures (exit 1).
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err
        .chain()
        .filter_map(|e| e.downcast_ref::<xreg::Error>())
        .any(xreg::Error::is_usage);
    if usage {
        2
    } else {
        1
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    xreg::Error::InvalidArgument(msg.into()).into()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let hp = Hyperparams {
        trees: a.trees,
        max_leaf: a.max_leaf,
        solver: SolverParams {
            c: a.c,
            tol: a.tol,
            max_iter: a.max_iter,
            prune: a.prune,
        },
        seed: a.seed,
    };
    hp.validate()?;
    let start = Instant::now();
    let data = read_dataset(&a.data)?;
    let model = train(&data, &hp)?;
    save_model(&model, &a.model)?;
    println!(
        "trained trees={} nodes={} time={:.3}s",
        model.trees.len(),
        model.num_nodes(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    if let Some(alpha) = a.tail_alpha {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(usage(format!("--tail-alpha must lie in [0, 1], got {alpha}")));
        }
    }
    let model = load_model(&a.model)?;
    let test = read_dataset(&a.data)?;
    let start = Instant::now();
    let xs = test.features();
    let mut pred = match a.mode {
        Mode::Pointwise => predict_pointwise(&model, xs, a.beam, a.topk)?,
        Mode::Labelwise => predict_labelwise(&model, xs, a.factor, a.per_label)?,
    };
    let elapsed = start.elapsed().as_secs_f64();

    if let Some(alpha) = a.tail_alpha {
        let tail = model
            .tail
            .as_ref()
            .context("model has no tail section; retrain it to use --tail-alpha")?;
        let scale = model.y_max;
        let rows: Vec<Vec<(u32, f64)>> = match a.mode {
            Mode::Pointwise => pred
                .rows
                .par_iter()
                .zip(xs)
                .map(|(row, x)| {
                    rerank_scaled(row, x, tail, alpha, scale)
                        .map(|r| r.into_iter().map(|e| (e.label, e.blended)).collect())
                })
                .collect::<xreg::Result<_>>()?,
            Mode::Labelwise => {
                let units: Vec<_> = xs.iter().map(|x| unit_point(x, tail)).collect();
                pred.rows
                    .par_iter()
                    .enumerate()
                    .map(|(label, row)| {
                        rerank_label(row, label as u32, &units, tail, alpha, scale)
                            .map(|r| r.into_iter().map(|e| (e.label, e.blended)).collect())
                    })
                    .collect::<xreg::Result<_>>()?
            }
        };
        pred = PredictionFile::new(pred.num_cols, rows);
    }

    write_predictions(&pred, &a.out)?;
    let per_point_ms = 1e3 * elapsed / test.num_points().max(1) as f64;
    log::info!(
        "event=predicted mode={:?} rows={} secs={elapsed:.3} ms_per_point={per_point_ms:.4}",
        a.mode,
        pred.num_rows
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let metrics: Vec<Metric> = a
        .metrics
        .iter()
        .map(|m| m.trim().parse())
        .collect::<xreg::Result<_>>()?;
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(usage("every k must be at least 1"));
    }
    let truth = read_dataset(&a.truth)?;
    let pred = read_predictions(&a.pred)?;
    let orientation = match a.orientation {
        OrientationArg::Pointwise => Orientation::Pointwise,
        OrientationArg::Labelwise => Orientation::Labelwise,
        OrientationArg::Auto => match Orientation::infer(&pred, truth.num_points(), truth.num_labels()) {
            Some(o) => o,
            None if pred.num_rows == pred.num_cols
                && truth.num_points() == truth.num_labels()
                && pred.num_rows == truth.num_points() =>
            {
                return Err(usage(
                    "prediction file is square; pass --orientation pointwise or labelwise",
                ))
            }
            None => bail!(
                "prediction file is {}x{} but the truth has {} points and {} labels",
                pred.num_rows,
                pred.num_cols,
                truth.num_points(),
                truth.num_labels()
            ),
        },
    };

    let propensity = match &a.train {
        Some(path) => Some(PropensityModel::from_dataset(&read_dataset(path)?, a.prop_a, a.prop_b)?),
        None if metrics.contains(&Metric::Psp) => {
            return Err(usage(
                "PSP needs label propensities, which are estimated from training-set label counts; pass --train",
            ))
        }
        None => None,
    };
    let eval = Evaluation::new(
        truth.relevances(),
        truth.num_labels(),
        &pred,
        orientation,
        propensity.as_ref(),
    )
    .with_context(|| format!("{} does not match {}", a.pred.display(), a.truth.display()))?;
    let report = eval.report(&metrics, &a.k)?;
    match a.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    if a.check_lemma1 {
        for &k in &a.k {
            let (checked, bad) = eval.lemma1_violations(k)?;
            println!("lemma1 k={k} checked={checked} violations={bad}");
        }
    }
    Ok(())
}

/// Returns whether every suite passed.
fn cmd_selftest(a: &SelftestArgs) -> Result<bool> {
    let xmad: XmadFn = match a.inject_fault {
        Some(Fault::XmadOffByOne) => off_by_one_xmad,
        None => xreg::metrics::xmad_at_k,
    };
    let cfg = SelftestConfig {
        iterations: a.iterations,
        seed: a.seed,
    };
    let results = run_all(&cfg, xmad)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<24} {} trials={} violations={} secs={:.3}",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.trials,
            r.violations,
            r.elapsed.as_secs_f64()
        );
        for ex in &r.examples {
            println!("    {ex}");
        }
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed properties: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Selftest(a) => {
            if !cmd_selftest(a)? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XREG_LOG", "info"))
        .format_timestamp(None)
        .format_target(false)
        .init();

    let args: Vec<OsString> = std::env::args_os().collect();
    let args = match config::expand(args, &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
