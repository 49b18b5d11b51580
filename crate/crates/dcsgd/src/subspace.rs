//! Heavy-tailed random projection subspaces, projected-trace scoring, and the
//! noisy top-p body/tail partition.
//!
//! Each training step draws k fresh vectors from a sub-Weibull distribution,
//! orthonormalizes them (modified Gram–Schmidt with one re-orthogonalization
//! pass), and scores every normalized per-sample gradient by its captured
//! energy λ = ‖Vᵀĝ‖² ∈ [0, 1] — equal to tr(VᵀĝĝᵀV), the trace of the
//! projected second moment. Traces are perturbed with Gaussian noise for
//! privacy and the round(p·B) largest noisy values designate the heavy tail
//! of the batch.
//!
//! The module also evaluates the high-probability trace-estimation error
//! bound 4·ln(2d/δ_m)/k + σ_tr·ln^{1/2}(2/δ) and a diagnostic fixed point
//! t = μ·a·K²·I(t)/t for the trace scale at which the tail regime begins.

use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::subweibull::{a_constant, SubWeibullParams};

/// Basis-vector residual norms at or below this fraction of the raw draw are
/// treated as rank deficiency and trigger a redraw.
const RANK_TOL: f64 = 1e-10;

/// Maximum redraw attempts per basis vector before giving up.
const MAX_REDRAWS: usize = 3;

/// Errors from subspace construction and trace evaluation.
#[derive(Debug)]
pub enum SubspaceError {
    /// k must satisfy 1 ≤ k ≤ d.
    BadRank { k: usize, d: usize },
    /// A draw stayed numerically dependent after the redraw limit.
    RankDeficient { vector: usize },
    /// trace_score requires a unit (or exactly zero) input vector.
    NonUnitInput { norm: f64 },
    /// A probability parameter outside (0, 1).
    InvalidProbability { name: &'static str, value: f64 },
    /// A scale parameter that must be nonnegative and finite.
    InvalidScale { name: &'static str, value: f64 },
}

impl fmt::Display for SubspaceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubspaceError::BadRank { k, d } => {
                write!(f, "subspace rank k = {k} must satisfy 1 <= k <= d = {d}")
            }
            SubspaceError::RankDeficient { vector } => {
                write!(f, "basis vector {vector} remained rank-deficient after {MAX_REDRAWS} redraws")
            }
            SubspaceError::NonUnitInput { norm } => {
                write!(f, "trace input must be a unit or zero vector, got norm {norm}")
            }
            SubspaceError::InvalidProbability { name, value } => {
                write!(f, "{name} must lie in (0, 1), got {value}")
            }
            SubspaceError::InvalidScale { name, value } => {
                write!(f, "{name} must be nonnegative and finite, got {value}")
            }
        }
    }
}

impl std::error::Error for SubspaceError {}

/// An orthonormal k-dimensional projection subspace of R^d drawn from a
/// sub-Weibull source. `basis` stores the k basis vectors as contiguous rows
/// (row i is vᵢ), so the abstract d×k column matrix V satisfies
/// VᵀV = basis·basisᵀ = I(k).
#[derive(Debug, Clone)]
pub struct ProjectionSubspace {
    pub basis: Array2<f64>,
    pub source: SubWeibullParams,
    pub seed: u64,
}

impl ProjectionSubspace {
    pub fn k(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Largest absolute entry of basis·basisᵀ − I, the orthonormality defect.
    pub fn gram_residual(&self) -> f64 {
        let k = self.k();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            let ri = self.basis.row(i);
            for j in i..k {
                let dot = slice_dot(
                    ri.as_slice().expect("contiguous basis row"),
                    self.basis.row(j).as_slice().expect("contiguous basis row"),
                );
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Per-batch trace scores, their noisy versions, and the body/tail partition.
/// `tail_indices` holds the round(p·B) samples with the largest noisy traces
/// (ties broken toward lower index); both index sets are sorted ascending and
/// together partition 0..B.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub raw: Vec<f64>,
    pub noisy: Vec<f64>,
    pub sigma_tr: f64,
    pub tail_indices: Vec<usize>,
    pub body_indices: Vec<usize>,
}

impl TraceRecord {
    pub fn batch_size(&self) -> usize {
        self.raw.len()
    }
}

fn slice_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws k sub-Weibull vectors in R^d seeded by `seed` and orthonormalizes
/// them by modified Gram–Schmidt with one re-orthogonalization pass. A draw
/// whose residual collapses (numerical rank deficiency) is redrawn up to
/// three times. Deterministic: the same (d, k, source, seed) always produces
/// the same basis.
pub fn build_subspace(
    d: usize,
    k: usize,
    source: SubWeibullParams,
    seed: u64,
) -> Result<ProjectionSubspace, SubspaceError> {
    if k < 1 || k > d {
        return Err(SubspaceError::BadRank { k, d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = Array2::zeros((k, d));
    for j in 0..k {
        let mut accepted = false;
        for _attempt in 0..MAX_REDRAWS {
            let mut v = source.sample_vector(d, &mut rng).expect("d >= 1 checked above");
            let raw_norm = slice_dot(&v, &v).sqrt();
            // Two orthogonalization sweeps push the defect to machine level.
            for _pass in 0..2 {
                for i in 0..j {
                    let row = basis.row(i);
                    let r = row.as_slice().expect("contiguous basis row");
                    let coef = slice_dot(&v, r);
                    for (vx, rx) in v.iter_mut().zip(r) {
                        *vx -= coef * rx;
                    }
                }
            }
            let residual = slice_dot(&v, &v).sqrt();
            if residual > RANK_TOL * raw_norm && residual > 0.0 {
                let inv = 1.0 / residual;
                for (out, vx) in basis.row_mut(j).iter_mut().zip(&v) {
                    *out = vx * inv;
                }
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(SubspaceError::RankDeficient { vector: j });
        }
    }
    Ok(ProjectionSubspace { basis, source, seed })
}

/// Captured energy of a normalized gradient in the subspace:
/// ‖Vᵀĝ‖² = Σᵢ (vᵢ·ĝ)² = tr(VᵀĝĝᵀV), clamped into [0, 1]. The zero vector
/// scores 0; any other non-unit input is rejected.
pub fn trace_score(
    space: &ProjectionSubspace,
    normalized_grad: &ArrayView1<f64>,
) -> Result<f64, SubspaceError> {
    let g = normalized_grad.as_slice().ok_or(SubspaceError::NonUnitInput { norm: f64::NAN })?;
    let norm = slice_dot(g, g).sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    if (norm - 1.0).abs() > 1e-9 {
        return Err(SubspaceError::NonUnitInput { norm });
    }
    let mut score = 0.0;
    for i in 0..space.k() {
        let c = slice_dot(space.basis.row(i).as_slice().expect("contiguous basis row"), g);
        score += c * c;
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Batched [`trace_score`] over the rows of a matrix of normalized gradients,
/// computed through one matrix product instead of per-row dot loops. The row
/// contract matches the scalar path: zero rows score 0, any other non-unit
/// row is rejected. Panics if the row width differs from the subspace
/// dimension (a programming error, like mismatched ndarray shapes).
pub fn trace_scores(
    space: &ProjectionSubspace,
    normalized_rows: &ArrayView2<f64>,
) -> Result<Vec<f64>, SubspaceError> {
    assert_eq!(
        normalized_rows.ncols(),
        space.dim(),
        "gradient rows must match the subspace dimension"
    );
    let b = normalized_rows.nrows();
    let mut zero = vec![false; b];
    for (i, row) in normalized_rows.axis_iter(ndarray::Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            zero[i] = true;
        } else if (norm - 1.0).abs() > 1e-9 {
            return Err(SubspaceError::NonUnitInput { norm });
        }
    }
    // (k × d) · (d × B): column j holds the subspace coefficients of row j.
    let coeffs = space.basis.dot(&normalized_rows.t());
    let mut scores = vec![0.0; b];
    for (j, score) in scores.iter_mut().enumerate() {
        if zero[j] {
            continue;
        }
        let col = coeffs.column(j);
        *score = col.dot(&col).clamp(0.0, 1.0);
    }
    Ok(scores)
}

/// Adds Gaussian noise of scale `sigma_tr` to each trace and partitions the
/// batch: the round(p·B) largest noisy traces (round-half-up; ties broken by
/// lower index) become the tail, the rest the body. Each trace has
/// sensitivity 1 — normalized gradients keep λ in [0, 1] — which is what the
/// Gaussian-mechanism calibration of `sigma_tr` assumes.
///
/// Contract (asserted): every trace lies in [0, 1], `sigma_tr >= 0`,
/// `p` in [0, 1].
pub fn perturb_and_partition<R: Rng + ?Sized>(
    traces: &[f64],
    sigma_tr: f64,
    p: f64,
    rng: &mut R,
) -> TraceRecord {
    assert!(sigma_tr >= 0.0 && sigma_tr.is_finite(), "sigma_tr must be nonnegative, got {sigma_tr}");
    assert!((0.0..=1.0).contains(&p), "tail ratio p must lie in [0, 1], got {p}");
    for (i, &t) in traces.iter().enumerate() {
        assert!((0.0..=1.0).contains(&t), "trace {i} = {t} outside [0, 1]");
    }
    let b = traces.len();
    // One standard-normal draw per trace regardless of sigma so the stream
    // advances identically across noisy and noiseless configurations.
    let noisy: Vec<f64> =
        traces.iter().map(|&t| t + sigma_tr * rng.sample::<f64, _>(StandardNormal)).collect();
    let tail_count = ((p * b as f64) + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| {
        noisy[j].partial_cmp(&noisy[i]).expect("finite noisy traces").then(i.cmp(&j))
    });
    let mut tail_indices: Vec<usize> = order[..tail_count].to_vec();
    let mut body_indices: Vec<usize> = order[tail_count..].to_vec();
    tail_indices.sort_unstable();
    body_indices.sort_unstable();
    TraceRecord { raw: traces.to_vec(), noisy, sigma_tr, tail_indices, body_indices }
}

/// High-probability bound on the trace estimation error (subspace skewing
/// plus trace noise): 4·ln(2d/δ_m)/k + σ_tr·ln^{1/2}(2/δ).
pub fn trace_error_bound(
    k: usize,
    d: usize,
    delta_m: f64,
    sigma_tr: f64,
    delta: f64,
) -> Result<f64, SubspaceError> {
    if k < 1 || d < 1 {
        return Err(SubspaceError::BadRank { k, d });
    }
    if !(delta_m > 0.0 && delta_m < 1.0) {
        return Err(SubspaceError::InvalidProbability { name: "delta_m", value: delta_m });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SubspaceError::InvalidProbability { name: "delta", value: delta });
    }
    if !(sigma_tr >= 0.0 && sigma_tr.is_finite()) {
        return Err(SubspaceError::InvalidScale { name: "sigma_tr", value: sigma_tr });
    }
    Ok(4.0 * (2.0 * d as f64 / delta_m).ln() / k as f64 + sigma_tr * (2.0 / delta).ln().sqrt())
}

/// Diagnostic scale at which trace deviations leave the normal-concentration
/// regime: the fixed point of t² = μ·a(θ)·K²·(t/K)^{1/θ} with μ = 1/2,
/// where (t/K)^{1/θ} is the sub-Weibull tail-rate function. Solved by
/// bisection in log-space (the equation is linear there). Returns `None` at
/// θ = 1/2, where μ·a = 1 makes the equation an identity with no isolated
/// fixed point, or when the fixed point overflows f64.
///
/// Diagnostic only: the training loop identifies the tail empirically by the
/// top-p rule and never consumes this value.
pub fn lambda_max_diagnostic(source: &SubWeibullParams) -> Option<f64> {
    const MU: f64 = 0.5;
    let theta = source.theta();
    let k_scale = source.scale();
    if theta == 0.5 {
        return None;
    }
    let a = a_constant(theta).expect("theta validated by SubWeibullParams");
    // g(u) = 2u − ln(μ·a·K²) − (1/θ)(u − ln K) with u = ln t; g is increasing
    // for θ > 1/2 (slope 2 − 1/θ > 0).
    let g = |u: f64| 2.0 * u - (MU * a * k_scale * k_scale).ln() - (u - k_scale.ln()) / theta;
    let (mut lo, mut hi) = (k_scale.ln() - 1e4, k_scale.ln() + 1e4);
    if g(lo) > 0.0 || g(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (0.5 * (lo + hi)).exp();
    t.is_finite().then_some(t)
}
