//! Self-contained verification suite behind `verify-bounds`: empirical
//! sampler tails against the analytic envelope, subspace trace concentration
//! frequencies against the high-probability bound, the projected-trace
//! identity, basis orthonormality (with an optional deliberate fault for
//! exercising the detector), calibration homogeneity identities, and the
//! bound-halving formula check.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dcsgd::privacy::{calibrate, split_budget, PrivacyBudget, DEFAULT_M1, DEFAULT_M2};
use dcsgd::subspace::{build_subspace, trace_error_bound, trace_score};
use dcsgd::subweibull::SubWeibullParams;

/// Knobs for the verification suite.
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Subspace trials per (k, σ_tr) cell of the concentration check.
    pub trials: usize,
    /// Monte-Carlo draws per θ for the sampler tail check.
    pub draws: usize,
    /// Ambient dimension for the concentration check.
    pub dim: usize,
    pub seed: u64,
    /// Deliberately de-orthonormalize the bases fed to the orthonormality
    /// check, to confirm the detector trips.
    pub fault_inject: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { trials: 500, draws: 1_000_000, dim: 500, seed: 0, fault_inject: false }
    }
}

/// One named check with its verdict and the observed-vs-bound evidence.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: impl Into<String>, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), passed, detail }
}

/// Runs every check and returns the individual verdicts in a fixed order.
pub fn run_bound_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    out.extend(sampler_tail_checks(opts));
    out.extend(concentration_frequency_checks(opts));
    out.push(trace_identity_check(opts));
    out.push(orthonormality_check(opts));
    out.push(calibration_homogeneity_check(opts));
    out.push(bound_halving_check(opts));
    out
}

/// Empirical two-sided exceedance versus 2·exp(−(t/K)^{1/θ}) on a log grid,
/// with three standard errors of slack, plus the exact inverse-CDF identity
/// P(|X| > K) = 1/e.
fn sampler_tail_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut results = Vec::new();
    for (i, &theta) in [0.5, 1.0, 2.0].iter().enumerate() {
        let params = SubWeibullParams::new(theta, 1.0).expect("valid tail parameters");
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
        let mut magnitudes: Vec<f64> =
            (0..opts.draws).map(|_| params.sample(&mut rng).abs()).collect();
        magnitudes.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let n = magnitudes.len() as f64;

        let t_max = params.quantile_bound(1e-4).expect("valid quantile");
        let t_min = 0.3;
        let grid_points = 30;
        let mut worst_margin = f64::NEG_INFINITY;
        let mut worst_t = t_min;
        for j in 0..grid_points {
            let frac = j as f64 / (grid_points - 1) as f64;
            let t = t_min * (t_max / t_min).powf(frac);
            let exceed = magnitudes.partition_point(|&m| m <= t);
            let empirical = (magnitudes.len() - exceed) as f64 / n;
            let bound = params.tail_bound(t);
            let se = (empirical * (1.0 - empirical) / n).sqrt();
            let margin = empirical - (bound + 3.0 * se);
            if margin > worst_margin {
                worst_margin = margin;
                worst_t = t;
            }
        }
        results.push(outcome(
            format!("sampler-tail theta={theta}"),
            worst_margin <= 0.0,
            format!(
                "worst empirical-minus-(bound+3se) margin {worst_margin:.2e} at t={worst_t:.3} over {grid_points} grid points, {} draws",
                opts.draws
            ),
        ));

        let at_scale = magnitudes.partition_point(|&m| m <= 1.0);
        let empirical = (magnitudes.len() - at_scale) as f64 / n;
        let target = (-1.0f64).exp();
        let se = (target * (1.0 - target) / n).sqrt();
        let tol = (4.0 * se).max(0.002);
        let gap = (empirical - target).abs();
        results.push(outcome(
            format!("sampler-inverse-cdf theta={theta}"),
            gap <= tol,
            format!("|P(|X| > K) - 1/e| = {gap:.5} <= {tol:.5}"),
        ));
    }
    results
}

/// Frequency check of the trace-estimation bound: for an isotropic unit test
/// direction, E‖V_kᵀĝ‖² = k/d exactly, so k/d stands in for the true trace;
/// violations of |k/d − λ̂ + ζ| ≤ 4ln(2d/δ_m)/k + σ_tr·ln^{1/2}(2/δ) must
/// occur with frequency at most δ_m + δ.
fn concentration_frequency_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let delta_m = 0.05;
    let delta = 0.05;
    let sigmas = [0.0, 0.05];
    let d = opts.dim;
    let source = SubWeibullParams::new(2.0, 1.0).expect("valid projection source");
    let mut results = Vec::new();
    for &k in [50usize, 100, 200].iter().filter(|&&k| k < d) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1000 + k as u64));
        let mut violations = [0usize; 2];
        for _ in 0..opts.trials {
            let space = build_subspace(d, k, source, rng.gen::<u64>()).expect("subspace build");
            let g = unit_vector(d, &mut rng);
            let estimate = trace_score(&space, &g.view()).expect("unit input");
            for (s, &sigma) in sigmas.iter().enumerate() {
                let zeta = sigma * rng.sample::<f64, _>(StandardNormal);
                let bound = trace_error_bound(k, d, delta_m, sigma, delta).expect("valid bound");
                if (k as f64 / d as f64 - estimate + zeta).abs() > bound {
                    violations[s] += 1;
                }
            }
        }
        for (s, &sigma) in sigmas.iter().enumerate() {
            let freq = violations[s] as f64 / opts.trials as f64;
            results.push(outcome(
                format!("trace-concentration k={k} sigma_tr={sigma}"),
                freq <= delta_m + delta,
                format!(
                    "violation frequency {}/{} = {freq:.4} <= {:.2}",
                    violations[s],
                    opts.trials,
                    delta_m + delta
                ),
            ));
        }
    }
    results
}

/// The projected-trace identity: the score must equal the explicit trace of
/// VᵀĝĝᵀV within 1e−12 on random small instances.
fn trace_identity_check(opts: &VerifyOptions) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2000));
    let source = SubWeibullParams::new(2.0, 1.0).expect("valid projection source");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(4..=16);
        let k = rng.gen_range(1..=d);
        let space = build_subspace(d, k, source, rng.gen::<u64>()).expect("subspace build");
        let g = unit_vector(d, &mut rng);
        let score = trace_score(&space, &g.view()).expect("unit input");
        // tr(VᵀĝĝᵀV) expanded entry by entry.
        let mut explicit = 0.0;
        for row in space.basis.rows() {
            let mut dot = 0.0;
            for (a, b) in row.iter().zip(g.iter()) {
                dot += a * b;
            }
            explicit += dot * dot;
        }
        worst = worst.max((score - explicit).abs());
    }
    outcome(
        "trace-identity",
        worst <= 1e-12,
        format!("max |score - explicit trace| = {worst:.2e} over 100 instances"),
    )
}

/// Gram residual of built bases against the rank tolerance; with fault
/// injection the first basis entry is bumped, which must trip the detector.
fn orthonormality_check(opts: &VerifyOptions) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3000));
    let mut worst = 0.0f64;
    for &theta in &[0.5, 1.0, 2.0] {
        let source = SubWeibullParams::new(theta, 1.0).expect("valid projection source");
        for _ in 0..10 {
            let d = rng.gen_range(20..=120);
            let k = rng.gen_range(1..=d / 2);
            let mut space = build_subspace(d, k, source, rng.gen::<u64>()).expect("subspace build");
            if opts.fault_inject {
                space.basis[[0, 0]] += 0.05;
            }
            worst = worst.max(space.gram_residual());
        }
    }
    let tol = 1e-10;
    outcome(
        "orthonormality",
        worst <= tol,
        format!(
            "max gram residual {worst:.2e} (tolerance {tol:.0e}, fault injected: {})",
            opts.fault_inject
        ),
    )
}

/// Calibration scaling identities on random budgets: σ(2T)/σ(T) = √2,
/// σ(ε/2)/σ(ε) = 2, and exact budget-split conservation.
fn calibration_homogeneity_check(opts: &VerifyOptions) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4000));
    let mut worst_ratio = 0.0f64;
    let mut worst_split = 0.0f64;
    for _ in 0..100 {
        let eps = rng.gen_range(0.2..8.0);
        let delta = 10f64.powf(rng.gen_range(-7.0..-2.0));
        let q = rng.gen_range(1e-4..0.5);
        let t = rng.gen_range(10u64..5000);

        let sigma = |eps: f64, t: u64| {
            let budget = PrivacyBudget::new(0.0, eps, delta).expect("valid budget");
            let (scales, _) =
                calibrate(&budget, q, t, DEFAULT_M2, DEFAULT_M1).expect("valid calibration");
            scales.sigma_dp
        };
        let base = sigma(eps, t);
        let doubled_t = (sigma(eps, 2 * t) / base - 2f64.sqrt()).abs();
        let halved_eps = (sigma(eps / 2.0, t) / base - 2.0).abs();
        worst_ratio = worst_ratio.max(doubled_t).max(halved_eps);

        let fraction = rng.gen_range(0.0..0.99);
        let budget = split_budget(eps, fraction, delta).expect("valid split");
        worst_split = worst_split.max((budget.eps_tr + budget.eps_dp - eps).abs() / eps);
    }
    outcome(
        "calibration-homogeneity",
        worst_ratio <= 1e-12 && worst_split <= 1e-15,
        format!(
            "max ratio deviation {worst_ratio:.2e} (tol 1e-12), max split drift {worst_split:.2e} (tol 1e-15) over 100 budgets"
        ),
    )
}

/// The skewing term 4ln(2d/δ_m)/k must halve exactly when k doubles.
fn bound_halving_check(opts: &VerifyOptions) -> CheckOutcome {
    let d = opts.dim.max(2);
    let mut rows = Vec::new();
    let mut exact = true;
    for &k in &[25usize, 50, 100] {
        let b1 = trace_error_bound(k, d, 0.05, 0.0, 0.05).expect("valid bound");
        let b2 = trace_error_bound(2 * k, d, 0.05, 0.0, 0.05).expect("valid bound");
        exact &= 2.0 * b2 == b1;
        rows.push(format!("k={k}: {b1:.6} -> k={}: {b2:.6}", 2 * k));
    }
    outcome(
        "bound-halving",
        exact,
        format!("doubling k halves 4ln(2d/delta_m)/k exactly; {}", rows.join("; ")),
    )
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}
