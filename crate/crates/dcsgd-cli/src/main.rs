//! Command-line harness for the dcsgd library: run experiment grids from a
//! spec file, compare discriminative-clipping variants against baselines at
//! equal privacy budget, re-derive calibrated noise scales, generate IDX
//! image datasets, and empirically verify the library's analytic bounds.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 spec or configuration error,
//! 3 missing dataset, 4 training divergence.

mod checks;
mod run;
mod spec;
mod svg;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcsgd::gradients::{make_image_blobs, Labels};
use dcsgd::idx::{write_idx_images, write_idx_labels};
use dcsgd::privacy::{calibrate, split_budget, SpendLedger, DEFAULT_M1, DEFAULT_M2};
use dcsgd::rng::{grain_stream, PURPOSE_DATA};

use checks::{run_bound_checks, VerifyOptions};
use run::{
    check_equal_budgets, compare_report, execute_grid, metric_mean_series,
    render_comparison_table, render_summary_table, write_comparison_csv, write_curves_csv,
    CliFailure, GridOptions,
};
use spec::ExperimentSpec;

#[derive(Parser)]
#[command(name = "dcsgd", version, about = "Differentially private SGD experiment harness", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every (variant x seed) job of an experiment spec.
    Train(TrainArgs),
    /// Run a grid and score dc-dpsgd variants against the baselines at equal
    /// privacy budget.
    Compare(CompareArgs),
    /// Print the calibrated noise scales for a privacy budget.
    Calibrate(CalibrateArgs),
    /// Generate a class-imbalanced image dataset as an IDX pair.
    MakeData(MakeDataArgs),
    /// Empirically verify the sampler tails, trace concentration, and
    /// calibration identities against their analytic bounds.
    VerifyBounds(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Output root (default: the spec's output_dir, then out/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the grid.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Replace existing per-run privacy ledgers instead of refusing to
    /// re-spend a budget.
    #[arg(long)]
    override_ledger: bool,
    /// Directory holding <name>-images.idx / <name>-labels.idx pairs
    /// (default: $DCSGD_DATA_DIR, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated override of the spec's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Also render the seed-averaged metric curves as an SVG chart.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Total privacy budget epsilon.
    #[arg(long)]
    eps_total: f64,
    /// Fraction of the budget assigned to the trace stage, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    fraction_tr: f64,
    /// Failure probability delta.
    #[arg(long)]
    delta: f64,
    /// Step count the accountant charges for.
    #[arg(long)]
    t_steps: u64,
    /// Sampling ratio q (alternative: --batch-size together with --n).
    #[arg(long, conflicts_with_all = ["batch_size", "n"])]
    q: Option<f64>,
    /// Batch size, combined with --n to derive q.
    #[arg(long, requires = "n")]
    batch_size: Option<usize>,
    /// Population size, combined with --batch-size to derive q.
    #[arg(long, requires = "batch_size")]
    n: Option<usize>,
}

#[derive(Args)]
struct MakeDataArgs {
    /// Directory receiving the IDX pair (default: $DCSGD_DATA_DIR, then
    /// ./data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset name; files are written as <name>-images.idx and
    /// <name>-labels.idx.
    #[arg(long, default_value = "mnist-like")]
    name: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Total sample count across all classes.
    #[arg(long, default_value_t = 10_000)]
    total: usize,
    /// Geometric class-imbalance decay in (0, 1]; 1 keeps classes balanced.
    #[arg(long, default_value_t = 0.75)]
    decay: f64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 28)]
    side: usize,
    /// Additive pixel noise level.
    #[arg(long, default_value_t = 0.15)]
    pixel_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Subspace trials per concentration configuration.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    /// Monte-Carlo draws per theta for the sampler tail checks.
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    /// Ambient dimension for the concentration checks.
    #[arg(long, default_value_t = 500)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately corrupt the projection bases to confirm the checks can
    /// fail.
    #[arg(long)]
    fault_inject: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Compare(args) => cmd_compare(&args),
        Cmd::Calibrate(args) => cmd_calibrate(&args),
        Cmd::MakeData(args) => cmd_make_data(&args),
        Cmd::VerifyBounds(args) => cmd_verify_bounds(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliFailure> {
    let (spec, opts) = load_spec(args)?;
    let rows = execute_grid(&spec, &opts)?;
    print!("{}", render_summary_table(&rows));
    println!("artifacts under {}", opts.out_root.display());
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliFailure> {
    let (spec, opts) = load_spec(&args.train)?;
    check_equal_budgets(&spec)?;
    let rows = execute_grid(&spec, &opts)?;
    print!("{}", render_summary_table(&rows));
    let table = compare_report(&spec, &opts.out_root)?;
    write_comparison_csv(&table, &opts.out_root.join("comparison.csv"))?;
    write_curves_csv(&spec, &opts.out_root, &opts.out_root.join("curves.csv"))?;
    print!("{}", render_comparison_table(&table));
    if args.svg {
        let series = metric_mean_series(&spec, &opts.out_root)?;
        let chart = svg::line_chart("seed-averaged objective metric", "step", "metric", &series);
        let path = opts.out_root.join("metric_curves.svg");
        fs::write(&path, chart)
            .map_err(|e| CliFailure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        println!("chart written to {}", path.display());
    }
    println!("artifacts under {}", opts.out_root.display());
    Ok(())
}

fn load_spec(args: &TrainArgs) -> Result<(ExperimentSpec, GridOptions), CliFailure> {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| CliFailure::Config(format!("cannot read {}: {e}", args.spec.display())))?;
    let mut spec = ExperimentSpec::parse(&text)
        .map_err(|e| CliFailure::Config(format!("{}: {e}", args.spec.display())))?;
    if let Some(seeds) = &args.seeds {
        let mut distinct = seeds.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if seeds.is_empty() || distinct.len() != seeds.len() {
            return Err(CliFailure::Config("--seeds must be a distinct, nonempty list".into()));
        }
        spec.seeds = seeds.clone();
    }
    let out_root = args
        .out
        .clone()
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&spec.name));
    Ok((
        spec,
        GridOptions {
            out_root,
            workers: args.workers.max(1),
            override_ledger: args.override_ledger,
            data_dir: resolve_data_dir(args.data_dir.clone()),
        },
    ))
}

fn resolve_data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DCSGD_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), CliFailure> {
    let q = match (args.q, args.batch_size, args.n) {
        (Some(q), _, _) => q,
        (None, Some(b), Some(n)) if n > 0 => b as f64 / n as f64,
        _ => {
            return Err(CliFailure::Config(
                "pass --q, or --batch-size together with a positive --n".into(),
            ))
        }
    };
    let budget = split_budget(args.eps_total, args.fraction_tr, args.delta)
        .map_err(|e| CliFailure::Config(e.to_string()))?;
    let (scales, warnings) = calibrate(&budget, q, args.t_steps, DEFAULT_M2, DEFAULT_M1)
        .map_err(|e| CliFailure::Config(e.to_string()))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", SpendLedger::new(budget, scales).to_text());
    Ok(())
}

fn cmd_make_data(args: &MakeDataArgs) -> Result<(), CliFailure> {
    if args.name.is_empty()
        || !args.name.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b))
    {
        return Err(CliFailure::Config(format!(
            "dataset name `{}` must be nonempty and use only [A-Za-z0-9._-]",
            args.name
        )));
    }
    let out_dir = resolve_data_dir(args.out.clone());
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliFailure::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut rng = grain_stream(args.seed, PURPOSE_DATA, 0, 0);
    let data = make_image_blobs(args.classes, args.total, args.decay, args.side, args.pixel_noise, &mut rng)
        .map_err(|e| CliFailure::Config(e.to_string()))?;
    let Labels::Classes(labels) = &data.labels else {
        unreachable!("image blobs are class-labeled");
    };
    let images_path = out_dir.join(format!("{}-images.idx", args.name));
    let labels_path = out_dir.join(format!("{}-labels.idx", args.name));
    write_idx_images(&images_path, &data.features, args.side, args.side)
        .map_err(|e| CliFailure::Runtime(format!("cannot write {}: {e}", images_path.display())))?;
    write_idx_labels(&labels_path, labels)
        .map_err(|e| CliFailure::Runtime(format!("cannot write {}: {e}", labels_path.display())))?;
    println!(
        "wrote {} {}x{} images across {} classes to {} and {}",
        data.len(),
        args.side,
        args.side,
        args.classes,
        images_path.display(),
        labels_path.display()
    );
    println!("class counts: {:?}", data.class_counts);
    Ok(())
}

fn cmd_verify_bounds(args: &VerifyArgs) -> Result<(), CliFailure> {
    if args.trials == 0 || args.draws == 0 || args.dim < 2 {
        return Err(CliFailure::Config(
            "verify-bounds needs positive --trials and --draws and --dim >= 2".into(),
        ));
    }
    let opts = VerifyOptions {
        trials: args.trials,
        draws: args.draws,
        dim: args.dim,
        seed: args.seed,
        fault_inject: args.fault_inject,
    };
    let outcomes = run_bound_checks(&opts);
    let mut failed = 0usize;
    for o in &outcomes {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", o.name, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliFailure::Runtime(format!(
            "{failed} of {} bound checks failed",
            outcomes.len()
        )));
    }
    println!("all {} bound checks passed", outcomes.len());
    Ok(())
}
