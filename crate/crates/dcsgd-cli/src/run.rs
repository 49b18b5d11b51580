//! Grid execution and artifact plumbing: resolve targets, calibrate each
//! variant's budget, run every (variant × seed) job in a worker pool, write
//! one trace CSV and one privacy ledger per run directory, and fold summaries
//! and comparisons back out of the on-disk artifacts — never out of live run
//! state, so every table is recomputable from the files alone.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array1;
use rayon::prelude::*;

use dcsgd::gradients::{Dataset, GradientError, ModelKind, SyntheticObjective};
use dcsgd::idx::dataset_from_idx;
use dcsgd::privacy::{
    calibrate, split_budget, write_spend_ledger, PrivacyError, SpendLedger, DEFAULT_M1, DEFAULT_M2,
    LEDGER_FILE_NAME,
};
use dcsgd::subweibull::SubWeibullParams;
use dcsgd::trainer::{
    read_trace_csv, run_dc_dpsgd, run_dpsgd, write_trace_csv, TrainConfig, TrainError, TrainTarget,
};

use crate::spec::{Algorithm, ExperimentSpec, ModelDecl, TargetDecl, VariantDef};
use crate::svg::Series;

pub const TRACE_FILE_NAME: &str = "trace.csv";

/// Harness failures, each mapped to a documented exit code.
#[derive(Debug)]
pub enum CliFailure {
    /// Spec parse or configuration error (exit 2).
    Config(String),
    /// A referenced dataset is not on disk (exit 3).
    DataMissing(String),
    /// One or more runs left the finite range (exit 4).
    Diverged(Vec<String>),
    /// Anything else (exit 1).
    Runtime(String),
}

impl CliFailure {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliFailure::Config(_) => 2,
            CliFailure::DataMissing(_) => 3,
            CliFailure::Diverged(_) => 4,
            CliFailure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliFailure::Config(msg) => write!(f, "{msg}"),
            CliFailure::DataMissing(msg) => write!(f, "{msg}"),
            CliFailure::Diverged(runs) => {
                write!(f, "training diverged in: {}", runs.join(", "))
            }
            CliFailure::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliFailure {}

/// Where and how a grid executes.
#[derive(Debug, Clone)]
pub struct GridOptions {
    pub out_root: PathBuf,
    pub workers: usize,
    pub override_ledger: bool,
    pub data_dir: PathBuf,
}

/// Per-variant aggregate of final metrics across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub mean_metric: f64,
    pub std_metric: f64,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

/// Final-step values of one finished run, read back from its trace CSV.
#[derive(Debug, Clone)]
pub struct RunFinal {
    pub variant: String,
    pub seed: u64,
    pub metric: f64,
    pub accuracy: Option<f64>,
}

/// A DC-versus-baseline pairing at equal budget.
#[derive(Debug, Clone)]
pub struct PairedComparison {
    pub candidate: String,
    pub baseline: String,
    /// Which column decided wins: "accuracy" (higher wins) or "metric"
    /// (lower wins).
    pub score: &'static str,
    pub candidate_mean: f64,
    pub candidate_std: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

struct RunJob {
    label: String,
    algorithm: Algorithm,
    seed: u64,
    dir: PathBuf,
    cfg: TrainConfig,
    ledger: SpendLedger,
}

/// The directory holding one run's artifacts.
pub fn run_dir(out_root: &Path, variant: &str, seed: u64) -> PathBuf {
    out_root.join(variant).join(format!("seed-{seed}"))
}

/// Runs the whole grid, writes per-run artifacts and `summary.csv`, and
/// returns the summary rows (folded from the artifacts on disk).
pub fn execute_grid(
    spec: &ExperimentSpec,
    opts: &GridOptions,
) -> Result<Vec<SummaryRow>, CliFailure> {
    let jobs = build_jobs(spec, opts)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| CliFailure::Runtime(format!("cannot size worker pool: {e}")))?;
    let override_ledger = opts.override_ledger;
    let results: Vec<Result<String, CliFailure>> =
        pool.install(|| jobs.par_iter().map(|j| run_one(j, override_ledger)).collect());

    let mut diverged = Vec::new();
    for result in results {
        match result {
            Ok(line) => println!("{line}"),
            Err(CliFailure::Diverged(runs)) => diverged.extend(runs),
            Err(other) => return Err(other),
        }
    }
    if !diverged.is_empty() {
        return Err(CliFailure::Diverged(diverged));
    }

    let rows = fold_summary(spec, &opts.out_root)?;
    write_summary_csv(&rows, &opts.out_root.join("summary.csv"))?;
    Ok(rows)
}

fn build_jobs(spec: &ExperimentSpec, opts: &GridOptions) -> Result<Vec<RunJob>, CliFailure> {
    let datasets = load_datasets(spec, &opts.data_dir)?;
    let mut jobs = Vec::with_capacity(spec.variants.len() * spec.seeds.len());
    for variant in &spec.variants {
        let target = make_target(variant, &datasets)?;
        let budget = split_budget(variant.eps_total, variant.split_fraction_tr, variant.delta)
            .map_err(|e| CliFailure::Config(format!("variant `{}`: {e}", variant.label)))?;
        let population = match &variant.target {
            TargetDecl::Synthetic { n_virtual, .. } => *n_virtual,
            TargetDecl::Data { dataset, .. } => datasets[dataset].len(),
        };
        let q = variant.batch_size as f64 / population as f64;
        let (scales, warnings) = calibrate(&budget, q, variant.t_steps, DEFAULT_M2, DEFAULT_M1)
            .map_err(|e| CliFailure::Config(format!("variant `{}`: {e}", variant.label)))?;
        for w in &warnings {
            eprintln!("warning: variant `{}`: {w}", variant.label);
        }
        let subspace_source = SubWeibullParams::new(variant.subspace_theta, 1.0)
            .map_err(|e| CliFailure::Config(format!("variant `{}`: {e}", variant.label)))?;
        for &seed in &spec.seeds {
            jobs.push(RunJob {
                label: variant.label.clone(),
                algorithm: variant.algorithm,
                seed,
                dir: run_dir(&opts.out_root, &variant.label, seed),
                cfg: TrainConfig {
                    t_steps: variant.t_steps,
                    epochs: variant.epochs,
                    batch_size: variant.batch_size,
                    lr: variant.lr,
                    clipping: variant.clipping,
                    noise: scales,
                    noise_mode: variant.noise_mode,
                    subspace_k: variant.subspace_k,
                    subspace_source,
                    poisson_sampling: variant.poisson,
                    seed,
                    target: target.clone(),
                },
                ledger: SpendLedger::new(budget, scales),
            });
        }
    }
    Ok(jobs)
}

fn load_datasets(
    spec: &ExperimentSpec,
    data_dir: &Path,
) -> Result<HashMap<String, Arc<Dataset>>, CliFailure> {
    let mut datasets = HashMap::new();
    for variant in &spec.variants {
        let TargetDecl::Data { dataset, model } = &variant.target else { continue };
        if datasets.contains_key(dataset) {
            continue;
        }
        let images = data_dir.join(format!("{dataset}-images.idx"));
        let labels = data_dir.join(format!("{dataset}-labels.idx"));
        if !images.is_file() || !labels.is_file() {
            return Err(CliFailure::DataMissing(format!(
                "dataset `{dataset}` not found under {}; generate it with \
                 `dcsgd make-data --name {dataset}` or point --data-dir / DCSGD_DATA_DIR at it",
                data_dir.display()
            )));
        }
        let classes = match model {
            ModelDecl::Logistic { classes } | ModelDecl::Mlp { classes, .. } => *classes,
            ModelDecl::Linear => usize::MAX,
        };
        let data = dataset_from_idx(&images, &labels, classes).map_err(|e| {
            CliFailure::Runtime(format!("dataset `{dataset}` failed to load: {e}"))
        })?;
        datasets.insert(dataset.clone(), Arc::new(data));
    }
    Ok(datasets)
}

fn make_target(
    variant: &VariantDef,
    datasets: &HashMap<String, Arc<Dataset>>,
) -> Result<TrainTarget, CliFailure> {
    match &variant.target {
        TargetDecl::Synthetic { dim, theta, k_scale, distance, curvature, .. } => {
            let w_star = Array1::from_elem(*dim, distance / (*dim as f64).sqrt());
            let noise = SubWeibullParams::new(*theta, *k_scale)
                .map_err(|e| CliFailure::Config(format!("variant `{}`: {e}", variant.label)))?;
            let objective = SyntheticObjective::new(w_star, *curvature, Some(noise), 1e12)
                .map_err(|e| CliFailure::Config(format!("variant `{}`: {e}", variant.label)))?;
            Ok(TrainTarget::Synthetic { objective })
        }
        TargetDecl::Data { dataset, model } => {
            let data = Arc::clone(&datasets[dataset]);
            let features = data.feature_dim();
            let kind = match model {
                ModelDecl::Logistic { classes } => {
                    ModelKind::LogisticRegression { features, classes: *classes }
                }
                ModelDecl::Linear => ModelKind::LinearRegression { features },
                ModelDecl::Mlp { hidden, classes } => {
                    ModelKind::Mlp { features, hidden: *hidden, classes: *classes }
                }
            };
            Ok(TrainTarget::Data { dataset: data, model: kind })
        }
    }
}

fn run_one(job: &RunJob, override_ledger: bool) -> Result<String, CliFailure> {
    let run_name = format!("{}/seed-{}", job.label, job.seed);
    write_spend_ledger(&job.dir, &job.ledger, override_ledger).map_err(|e| match e {
        PrivacyError::LedgerConflict { .. } => CliFailure::Runtime(format!(
            "{run_name}: {e}; pass --override-ledger to replace earlier artifacts"
        )),
        other => CliFailure::Runtime(format!("{run_name}: {other}")),
    })?;
    let trace = match job.algorithm {
        Algorithm::Dpsgd => run_dpsgd(&job.cfg),
        Algorithm::DcDpsgd => run_dc_dpsgd(&job.cfg),
    }
    .map_err(|e| classify_run_error(&run_name, e))?;
    write_trace_csv(&trace, &job.dir.join(TRACE_FILE_NAME))
        .map_err(|e| CliFailure::Runtime(format!("{run_name}: {e}")))?;
    let last = trace.records.last().expect("at least one step");
    let accuracy = match last.accuracy {
        Some(a) => format!(", accuracy {a:.4}"),
        None => String::new(),
    };
    Ok(format!(
        "[done] {run_name} ({}): final metric {:.6e}{accuracy}",
        job.algorithm.as_str(),
        last.metric
    ))
}

/// Divergence is a first-class outcome with its own exit code; everything
/// else is an ordinary failure.
fn classify_run_error(run_name: &str, e: TrainError) -> CliFailure {
    match e {
        TrainError::NonFinite { step } => {
            CliFailure::Diverged(vec![format!("{run_name} (step {step})")])
        }
        TrainError::Gradient(GradientError::NonFiniteLoss { sample }) => {
            CliFailure::Diverged(vec![format!("{run_name} (non-finite loss at sample {sample})")])
        }
        other => CliFailure::Runtime(format!("{run_name}: {other}")),
    }
}

/// Reads every run's final step back from its trace CSV, enforcing the
/// artifact invariant: each run directory holds exactly its ledger and trace.
pub fn collect_finals(
    spec: &ExperimentSpec,
    out_root: &Path,
) -> Result<Vec<RunFinal>, CliFailure> {
    let mut finals = Vec::new();
    for variant in &spec.variants {
        for &seed in &spec.seeds {
            let dir = run_dir(out_root, &variant.label, seed);
            if !dir.join(LEDGER_FILE_NAME).is_file() {
                return Err(CliFailure::Runtime(format!(
                    "{} is missing its privacy ledger; re-run training",
                    dir.display()
                )));
            }
            let records = read_trace_csv(&dir.join(TRACE_FILE_NAME)).map_err(|e| {
                CliFailure::Runtime(format!("{}: {e}; re-run training", dir.display()))
            })?;
            let last = records.last().ok_or_else(|| {
                CliFailure::Runtime(format!("{} holds an empty trace", dir.display()))
            })?;
            finals.push(RunFinal {
                variant: variant.label.clone(),
                seed,
                metric: last.metric,
                accuracy: last.accuracy,
            });
        }
    }
    Ok(finals)
}

/// Pure fold of the on-disk artifacts into per-variant summary rows.
pub fn fold_summary(spec: &ExperimentSpec, out_root: &Path) -> Result<Vec<SummaryRow>, CliFailure> {
    let finals = collect_finals(spec, out_root)?;
    let mut rows = Vec::with_capacity(spec.variants.len());
    for variant in &spec.variants {
        let of_variant: Vec<&RunFinal> =
            finals.iter().filter(|f| f.variant == variant.label).collect();
        let metrics: Vec<f64> = of_variant.iter().map(|f| f.metric).collect();
        let (mean_metric, std_metric) = mean_std(&metrics);
        let accuracies: Option<Vec<f64>> =
            of_variant.iter().map(|f| f.accuracy).collect();
        let (mean_accuracy, std_accuracy) = match accuracies {
            Some(values) => {
                let (m, s) = mean_std(&values);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        rows.push(SummaryRow {
            variant: variant.label.clone(),
            runs: of_variant.len(),
            mean_metric,
            std_metric,
            mean_accuracy,
            std_accuracy,
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<(), CliFailure> {
    let csv_err = |e: csv::Error| CliFailure::Runtime(format!("cannot write summary: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "variant",
        "runs",
        "mean_final_metric",
        "std_final_metric",
        "mean_final_accuracy",
        "std_final_accuracy",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record(&[
            r.variant.clone(),
            r.runs.to_string(),
            r.mean_metric.to_string(),
            r.std_metric.to_string(),
            r.mean_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            r.std_accuracy.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliFailure::Runtime(format!("cannot write summary: {e}")))
}

pub fn render_summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>5} {:>26} {:>26}\n",
        "variant", "runs", "final metric (mean+-std)", "final accuracy (mean+-std)"
    ));
    for r in rows {
        let metric = format!("{:.4e} +- {:.2e}", r.mean_metric, r.std_metric);
        let accuracy = match (r.mean_accuracy, r.std_accuracy) {
            (Some(m), Some(s)) => format!("{:.4} +- {:.4}", m, s),
            _ => "-".to_string(),
        };
        out.push_str(&format!("{:<20} {:>5} {:>26} {:>26}\n", r.variant, r.runs, metric, accuracy));
    }
    out
}

/// The unfair-comparison guard: every variant must declare the same total
/// privacy budget.
pub fn check_equal_budgets(spec: &ExperimentSpec) -> Result<(), CliFailure> {
    let first = &spec.variants[0];
    for v in &spec.variants[1..] {
        if v.eps_total != first.eps_total || v.delta != first.delta {
            return Err(CliFailure::Config(format!(
                "equal-budget comparison requires one (eps_total, delta) across variants; \
                 `{}` declares ({}, {}) but `{}` declares ({}, {})",
                first.label, first.eps_total, first.delta, v.label, v.eps_total, v.delta
            )));
        }
    }
    Ok(())
}

/// Builds the paired DC-versus-baseline table from on-disk artifacts. Data
/// targets score by final accuracy (higher wins); synthetic targets by final
/// metric (lower wins).
pub fn compare_report(
    spec: &ExperimentSpec,
    out_root: &Path,
) -> Result<Vec<PairedComparison>, CliFailure> {
    let finals = collect_finals(spec, out_root)?;
    let accuracy_mode = finals.iter().all(|f| f.accuracy.is_some());
    let by_run: HashMap<(&str, u64), &RunFinal> =
        finals.iter().map(|f| ((f.variant.as_str(), f.seed), f)).collect();
    let score = |f: &RunFinal| if accuracy_mode { f.accuracy.expect("checked above") } else { f.metric };

    let candidates: Vec<&VariantDef> =
        spec.variants.iter().filter(|v| v.algorithm == Algorithm::DcDpsgd).collect();
    let baselines: Vec<&VariantDef> =
        spec.variants.iter().filter(|v| v.algorithm != Algorithm::DcDpsgd).collect();
    if candidates.is_empty() || baselines.is_empty() {
        return Err(CliFailure::Config(
            "comparison needs at least one dc-dpsgd variant and one baseline variant".into(),
        ));
    }

    let mut table = Vec::new();
    for candidate in &candidates {
        let c_scores: Vec<f64> = spec
            .seeds
            .iter()
            .map(|s| score(by_run[&(candidate.label.as_str(), *s)]))
            .collect();
        let (candidate_mean, candidate_std) = mean_std(&c_scores);
        for baseline in &baselines {
            let b_scores: Vec<f64> = spec
                .seeds
                .iter()
                .map(|s| score(by_run[&(baseline.label.as_str(), *s)]))
                .collect();
            let (baseline_mean, baseline_std) = mean_std(&b_scores);
            let mut wins = 0;
            let mut losses = 0;
            let mut ties = 0;
            for (c, b) in c_scores.iter().zip(b_scores.iter()) {
                if c == b {
                    ties += 1;
                } else if (accuracy_mode && c > b) || (!accuracy_mode && c < b) {
                    wins += 1;
                } else {
                    losses += 1;
                }
            }
            table.push(PairedComparison {
                candidate: candidate.label.clone(),
                baseline: baseline.label.clone(),
                score: if accuracy_mode { "accuracy" } else { "metric" },
                candidate_mean,
                candidate_std,
                baseline_mean,
                baseline_std,
                wins,
                losses,
                ties,
            });
        }
    }
    Ok(table)
}

pub fn write_comparison_csv(table: &[PairedComparison], path: &Path) -> Result<(), CliFailure> {
    let csv_err = |e: csv::Error| CliFailure::Runtime(format!("cannot write comparison: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "candidate",
        "baseline",
        "score",
        "candidate_mean",
        "candidate_std",
        "baseline_mean",
        "baseline_std",
        "wins",
        "losses",
        "ties",
    ])
    .map_err(csv_err)?;
    for r in table {
        w.write_record(&[
            r.candidate.clone(),
            r.baseline.clone(),
            r.score.to_string(),
            r.candidate_mean.to_string(),
            r.candidate_std.to_string(),
            r.baseline_mean.to_string(),
            r.baseline_std.to_string(),
            r.wins.to_string(),
            r.losses.to_string(),
            r.ties.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliFailure::Runtime(format!("cannot write comparison: {e}")))
}

pub fn render_comparison_table(table: &[PairedComparison]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<16} {:<9} {:>22} {:>22} {:>11}\n",
        "candidate", "baseline", "score", "candidate (mean+-std)", "baseline (mean+-std)", "win/loss/tie"
    ));
    for r in table {
        out.push_str(&format!(
            "{:<16} {:<16} {:<9} {:>22} {:>22} {:>11}\n",
            r.candidate,
            r.baseline,
            r.score,
            format!("{:.4e} +- {:.2e}", r.candidate_mean, r.candidate_std),
            format!("{:.4e} +- {:.2e}", r.baseline_mean, r.baseline_std),
            format!("{}/{}/{}", r.wins, r.losses, r.ties),
        ));
    }
    out
}

/// Long-format per-step curves for external plotting.
pub fn write_curves_csv(
    spec: &ExperimentSpec,
    out_root: &Path,
    path: &Path,
) -> Result<(), CliFailure> {
    let csv_err = |e: csv::Error| CliFailure::Runtime(format!("cannot write curves: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["variant", "seed", "step", "metric", "loss", "accuracy"]).map_err(csv_err)?;
    for variant in &spec.variants {
        for &seed in &spec.seeds {
            let dir = run_dir(out_root, &variant.label, seed);
            let records = read_trace_csv(&dir.join(TRACE_FILE_NAME)).map_err(|e| {
                CliFailure::Runtime(format!("{}: {e}; re-run training", dir.display()))
            })?;
            for r in &records {
                w.write_record(&[
                    variant.label.clone(),
                    seed.to_string(),
                    r.step.to_string(),
                    r.metric.to_string(),
                    r.loss.to_string(),
                    r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| CliFailure::Runtime(format!("cannot write curves: {e}")))
}

/// Seed-averaged metric curve per variant, for the chart emitter.
pub fn metric_mean_series(
    spec: &ExperimentSpec,
    out_root: &Path,
) -> Result<Vec<Series>, CliFailure> {
    let mut series = Vec::with_capacity(spec.variants.len());
    for variant in &spec.variants {
        let mut per_seed = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let dir = run_dir(out_root, &variant.label, seed);
            let records = read_trace_csv(&dir.join(TRACE_FILE_NAME)).map_err(|e| {
                CliFailure::Runtime(format!("{}: {e}; re-run training", dir.display()))
            })?;
            per_seed.push(records);
        }
        let steps = per_seed.iter().map(|r| r.len()).min().unwrap_or(0);
        let points = (0..steps)
            .map(|i| {
                let mean = per_seed.iter().map(|r| r[i].metric).sum::<f64>() / per_seed.len() as f64;
                (per_seed[0][i].step as f64, mean)
            })
            .collect();
        series.push(Series { label: variant.label.clone(), points });
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::ExperimentSpec;
    use std::fs;

    const SMALL_GRID: &str = "\
name = smoke
seeds = 1, 2, 3
target = synthetic
dim = 6
theta = 2.0
distance = 2.0
n_virtual = 10000
t_steps = 15
batch_size = 8
lr = 0.1
eps_total = 8.0
delta = 1e-5

[variant.1]
label = dc
algorithm = dc-dpsgd
split_fraction_tr = 0.5
c1 = 2.0
c2 = 1.0
p = 0.25
subspace_k = 3

[variant.2]
label = baseline
algorithm = dpsgd
c = 2.0
";

    fn grid_options(root: &Path) -> GridOptions {
        GridOptions {
            out_root: root.to_path_buf(),
            workers: 2,
            override_ledger: false,
            data_dir: PathBuf::from("data"),
        }
    }

    #[test]
    fn a_grid_writes_artifacts_and_folds_a_recomputable_summary() {
        let spec = ExperimentSpec::parse(SMALL_GRID).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = grid_options(dir.path());
        let rows = execute_grid(&spec, &opts).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.runs, 3);
            assert!(row.mean_metric.is_finite());
            assert_eq!(row.mean_accuracy, None);
        }
        // Exactly one ledger and one trace per run directory.
        for variant in ["dc", "baseline"] {
            for seed in [1, 2, 3] {
                let d = run_dir(dir.path(), variant, seed);
                let names: Vec<String> = fs::read_dir(&d)
                    .unwrap()
                    .map(|e| e.unwrap().file_name().into_string().unwrap())
                    .collect();
                assert_eq!(names.len(), 2, "{names:?}");
                assert!(names.contains(&TRACE_FILE_NAME.to_string()));
                assert!(names.contains(&LEDGER_FILE_NAME.to_string()));
            }
        }
        // The summary is a pure fold of the artifacts: folding again from
        // disk reproduces it exactly.
        let refold = fold_summary(&spec, dir.path()).unwrap();
        assert_eq!(rows, refold);
        assert!(dir.path().join("summary.csv").is_file());
    }

    #[test]
    fn reruns_without_override_refuse_to_respend_the_budget() {
        let mut spec = ExperimentSpec::parse(SMALL_GRID).unwrap();
        spec.seeds = vec![1];
        spec.variants.truncate(1);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = grid_options(dir.path());
        execute_grid(&spec, &opts).unwrap();
        let err = execute_grid(&spec, &opts).unwrap_err();
        assert!(matches!(err, CliFailure::Runtime(_)));
        assert!(err.to_string().contains("--override-ledger"), "{err}");
        opts.override_ledger = true;
        execute_grid(&spec, &opts).unwrap();
    }

    #[test]
    fn comparisons_pair_candidates_against_baselines() {
        let spec = ExperimentSpec::parse(SMALL_GRID).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = grid_options(dir.path());
        execute_grid(&spec, &opts).unwrap();
        let table = compare_report(&spec, dir.path()).unwrap();
        assert_eq!(table.len(), 1);
        let row = &table[0];
        assert_eq!(row.candidate, "dc");
        assert_eq!(row.baseline, "baseline");
        assert_eq!(row.score, "metric");
        assert_eq!(row.wins + row.losses + row.ties, 3);

        let curves = dir.path().join("curves.csv");
        write_curves_csv(&spec, dir.path(), &curves).unwrap();
        let text = fs::read_to_string(&curves).unwrap();
        // Header plus 2 variants × 3 seeds × 15 steps.
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 15);

        let series = metric_mean_series(&spec, dir.path()).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].points.len(), 15);
    }

    #[test]
    fn budget_guard_rejects_unmatched_totals() {
        let uneven = SMALL_GRID.replace("algorithm = dpsgd", "algorithm = dpsgd\neps_total = 4.0");
        let spec = ExperimentSpec::parse(&uneven).unwrap();
        let err = check_equal_budgets(&spec).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("(8, 0.00001)") || err.to_string().contains("(8, 1e-5)"), "{err}");
        let even = ExperimentSpec::parse(SMALL_GRID).unwrap();
        check_equal_budgets(&even).unwrap();
    }

    #[test]
    fn missing_data_maps_to_its_own_failure_class() {
        let text = "\
name = data-smoke
seeds = 1
target = data
dataset = nowhere
model = logistic
classes = 3
t_steps = 5
batch_size = 4
lr = 0.1
eps_total = 2.0
delta = 1e-5

[variant.1]
algorithm = dpsgd
c = 1.0
";
        let spec = ExperimentSpec::parse(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = grid_options(dir.path());
        let err = execute_grid(&spec, &opts).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("make-data"), "{err}");
    }

    #[test]
    fn divergence_is_classified_with_exit_code_four() {
        // An enormous step size on a steep quadratic: the first update lands
        // near lr·c, where the raw gradient components overflow and the
        // clipped rows go non-finite.
        let text = SMALL_GRID
            .replace("lr = 0.1", "lr = 1e307")
            .replace("theta = 2.0", "theta = 2.0\ncurvature = 100.0");
        let mut spec = ExperimentSpec::parse(&text).unwrap();
        spec.variants.remove(0); // keep only the single-threshold baseline
        spec.seeds = vec![1];
        let dir = tempfile::tempdir().unwrap();
        let opts = grid_options(dir.path());
        let err = execute_grid(&spec, &opts).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }
}
