//! Gradient clipping mechanisms: single-threshold norm clipping, the Auto-S
//! normalization baseline, and the discriminative two-threshold clip-and-
//! noise step that distinguishes tail from body samples.
//!
//! The discriminative step clips every tail sample at c1 and every body
//! sample at c2 ≤ c1, perturbs each with Gaussian noise proportional to its
//! own threshold, and returns the batch average (1/B)·(Σ tail + Σ body). The
//! sum is accumulated in ascending sample order, so the degenerate case
//! c1 = c2 with zero noise reproduces the single-threshold average
//! bit-for-bit.
//!
//! Per-sample noise is drawn from a (step, sample)-derived stream rather than
//! one shared generator: results are identical no matter how the batch is
//! scheduled, and the aggregate-noise variant consumes a disjoint stream.
//! Threshold selection helpers evaluate the closed-form rules: the δ-driven
//! c1/c2 ratio and the analytic clipping levels for the body and tail
//! regimes.

use std::fmt;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{grain_stream, PURPOSE_GRAD_NOISE};
use crate::gradients::GradientBatch;
use crate::subspace::TraceRecord;
use crate::subweibull::a_constant;

/// Default stabilizer for the Auto-S normalization baseline.
pub const AUTO_S_GAMMA: f64 = 0.01;

/// Errors from clipping configuration and the discriminative step.
#[derive(Debug)]
pub enum ClipError {
    /// A threshold, ratio, or distribution parameter outside its domain.
    InvalidParameter { name: &'static str, value: f64 },
    /// TraceRecord and GradientBatch disagree on the batch size.
    PartitionMismatch { record: usize, batch: usize },
    /// Operation requires a different clipping mode.
    WrongMode { expected: &'static str },
}

impl fmt::Display for ClipError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClipError::InvalidParameter { name, value } => {
                write!(f, "invalid clipping parameter {name} = {value}")
            }
            ClipError::PartitionMismatch { record, batch } => {
                write!(f, "trace record covers {record} samples but batch has {batch}")
            }
            ClipError::WrongMode { expected } => {
                write!(f, "operation requires {expected} clipping mode")
            }
        }
    }
}

impl std::error::Error for ClipError {}

/// Which clipping mechanism a run uses. Single-threshold modes read their
/// threshold from `c2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    Abadi,
    AutoS,
    Discriminative,
}

/// Where the Gaussian perturbation is applied in a private step: one draw per
/// sample scaled by that sample's threshold (the discriminative algorithm as
/// written), or a single draw on the batch sum (the classic algorithm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    PerSample,
    Aggregate,
}

/// Thresholds and tail ratio for a clipping mechanism. In discriminative
/// mode c1 caps the tail and c2 the body with c1 ≥ c2 > 0; single-threshold
/// modes use c2 (an infinite c2 in Abadi mode disables clipping, for non-DP
/// baselines).
#[derive(Debug, Clone, Copy)]
pub struct ClippingConfig {
    pub c1: f64,
    pub c2: f64,
    pub p: f64,
    pub mode: ClipMode,
}

impl ClippingConfig {
    pub fn discriminative(c1: f64, c2: f64, p: f64) -> Result<Self, ClipError> {
        if !(c2.is_finite() && c2 > 0.0) {
            return Err(ClipError::InvalidParameter { name: "c2", value: c2 });
        }
        if !(c1.is_finite() && c1 >= c2) {
            return Err(ClipError::InvalidParameter { name: "c1", value: c1 });
        }
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            return Err(ClipError::InvalidParameter { name: "p", value: p });
        }
        Ok(Self { c1, c2, p, mode: ClipMode::Discriminative })
    }

    pub fn abadi(c: f64) -> Result<Self, ClipError> {
        if !(c > 0.0) {
            return Err(ClipError::InvalidParameter { name: "c", value: c });
        }
        Ok(Self { c1: c, c2: c, p: 0.0, mode: ClipMode::Abadi })
    }

    pub fn auto_s(c: f64) -> Result<Self, ClipError> {
        if !(c.is_finite() && c > 0.0) {
            return Err(ClipError::InvalidParameter { name: "c", value: c });
        }
        Ok(Self { c1: c, c2: c, p: 0.0, mode: ClipMode::AutoS })
    }
}

/// Norm clipping g / max(1, ‖g‖₂/c): direction preserved, output norm
/// min(‖g‖, c).
pub fn abadi_clip(g: &ArrayView1<f64>, c: f64) -> Array1<f64> {
    debug_assert!(c > 0.0, "clipping threshold must be positive");
    let norm = g.dot(g).sqrt();
    let scale = 1.0 / (norm / c).max(1.0);
    g.mapv(|v| v * scale)
}

/// Smooth normalization baseline c·g/(‖g‖ + γ): output norm strictly below
/// c, monotone in ‖g‖.
pub fn auto_s_normalize(g: &ArrayView1<f64>, c: f64, gamma: f64) -> Array1<f64> {
    debug_assert!(c > 0.0 && gamma > 0.0, "auto-s requires positive c and gamma");
    let norm = g.dot(g).sqrt();
    let scale = c / (norm + gamma);
    g.mapv(|v| v * scale)
}

/// The discriminative clip-and-noise step: tail samples are clipped at c1,
/// body samples at c2, each perturbed per `noise_mode`, and averaged as
/// (1/B)·(Σ tail + Σ body).
///
/// Per-sample noise for the sample at batch position i is drawn from the
/// stream (master_seed, step, item = i); the aggregate draw uses item = 0 and
/// is scaled by c1·σ_dp when the tail is nonempty, c2·σ_dp otherwise. The
/// accumulation runs in ascending batch position so the c1 = c2 degenerate
/// case is bit-identical to the single-threshold average.
pub fn discriminative_step(
    batch: &GradientBatch,
    record: &TraceRecord,
    cfg: &ClippingConfig,
    sigma_dp: f64,
    noise_mode: NoiseMode,
    master_seed: u64,
    step: u64,
) -> Result<Array1<f64>, ClipError> {
    if cfg.mode != ClipMode::Discriminative {
        return Err(ClipError::WrongMode { expected: "discriminative" });
    }
    if !(sigma_dp >= 0.0 && sigma_dp.is_finite()) {
        return Err(ClipError::InvalidParameter { name: "sigma_dp", value: sigma_dp });
    }
    let b = batch.batch_size();
    if record.batch_size() != b {
        return Err(ClipError::PartitionMismatch { record: record.batch_size(), batch: b });
    }
    let d = batch.dim();
    let mut in_tail = vec![false; b];
    for &i in &record.tail_indices {
        if i >= b {
            return Err(ClipError::PartitionMismatch { record: i + 1, batch: b });
        }
        in_tail[i] = true;
    }
    let mut sum = Array1::<f64>::zeros(d);
    for i in 0..b {
        let c = if in_tail[i] { cfg.c1 } else { cfg.c2 };
        let clipped = abadi_clip(&batch.per_sample.row(i), c);
        match noise_mode {
            NoiseMode::PerSample => {
                let mut stream = grain_stream(master_seed, PURPOSE_GRAD_NOISE, step, i as u64);
                let scale = c * sigma_dp;
                for (acc, v) in sum.iter_mut().zip(clipped.iter()) {
                    *acc += v + scale * stream.sample::<f64, _>(StandardNormal);
                }
            }
            NoiseMode::Aggregate => {
                sum += &clipped;
            }
        }
    }
    if noise_mode == NoiseMode::Aggregate {
        let scale =
            if record.tail_indices.is_empty() { cfg.c2 } else { cfg.c1 } * sigma_dp;
        let mut stream = grain_stream(master_seed, PURPOSE_GRAD_NOISE, step, 0);
        for acc in sum.iter_mut() {
            *acc += scale * stream.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(sum / b as f64)
}

/// Tail threshold implied by the body threshold under the δ-driven rule
/// c1 = c2·(log10(1/δ))^(θ − 1/2); θ = 1/2 collapses to c1 = c2. Base-10
/// logarithm: at δ = 1e−5, θ = 2 the ratio is 5^{3/2} = √125 ≈ 11.18.
pub fn threshold_guidance(theta: f64, delta: f64, c2: f64) -> Result<f64, ClipError> {
    if !(theta.is_finite() && theta >= 0.5) {
        return Err(ClipError::InvalidParameter { name: "theta", value: theta });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ClipError::InvalidParameter { name: "delta", value: delta });
    }
    if !(c2.is_finite() && c2 > 0.0) {
        return Err(ClipError::InvalidParameter { name: "c2", value: c2 });
    }
    Ok(c2 * (1.0 / delta).log10().powf(theta - 0.5))
}

/// Which clipping regime a theoretical threshold is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipRegime {
    Body,
    Tail,
}

fn validate_theoretical_inputs(
    theta: f64,
    k_scale: f64,
    t_steps: f64,
    delta: f64,
) -> Result<f64, ClipError> {
    if !(k_scale.is_finite() && k_scale > 0.0) {
        return Err(ClipError::InvalidParameter { name: "k_scale", value: k_scale });
    }
    if !(t_steps.is_finite() && t_steps >= 2.0) {
        return Err(ClipError::InvalidParameter { name: "t_steps", value: t_steps });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ClipError::InvalidParameter { name: "delta", value: delta });
    }
    a_constant(theta).map_err(|_| ClipError::InvalidParameter { name: "theta", value: theta })
}

/// Theoretical clipping threshold (leading expressions): body regime
/// max(2√(2a)·K·ln^{1/2}(√T), 33√(2a)·K·ln^{1/2}(2/δ)); tail regime
/// max(4^θ·2K·ln^θ(√T), 4^θ·33K·ln^θ(2/δ)). Natural logarithms; a = a(θ).
pub fn theoretical_c(
    theta: f64,
    k_scale: f64,
    t_steps: f64,
    delta: f64,
    regime: ClipRegime,
) -> Result<f64, ClipError> {
    let a = validate_theoretical_inputs(theta, k_scale, t_steps, delta)?;
    let log_sqrt_t = t_steps.sqrt().ln();
    let log_2_delta = (2.0 / delta).ln();
    Ok(match regime {
        ClipRegime::Body => {
            let root = (2.0 * a).sqrt();
            (2.0 * root * k_scale * log_sqrt_t.sqrt())
                .max(33.0 * root * k_scale * log_2_delta.sqrt())
        }
        ClipRegime::Tail => {
            let lead = 4f64.powf(theta);
            (lead * 2.0 * k_scale * log_sqrt_t.powf(theta))
                .max(lead * 33.0 * k_scale * log_2_delta.powf(theta))
        }
    })
}

/// Noise-adjusted variant of [`theoretical_c`] with the σ_dp-dependent
/// sub-case selection: when 16√(2a)·K·ln^r(2/δ) ≤ 12√e·σ_dp·ln^{1/2}(1/δ)
/// (r = 1/2 for the body regime, θ for the tail regime at θ = 1/2) the
/// second term becomes 27√e·σ_dp·ln^{1/2}(1/δ); the tail regime at θ > 1/2
/// uses 17K·ln^θ(2/δ) regardless of σ_dp.
pub fn theoretical_c_noise_adjusted(
    theta: f64,
    k_scale: f64,
    t_steps: f64,
    delta: f64,
    sigma_dp: f64,
    regime: ClipRegime,
) -> Result<f64, ClipError> {
    let a = validate_theoretical_inputs(theta, k_scale, t_steps, delta)?;
    if !(sigma_dp >= 0.0 && sigma_dp.is_finite()) {
        return Err(ClipError::InvalidParameter { name: "sigma_dp", value: sigma_dp });
    }
    let root = (2.0 * a).sqrt();
    let log_sqrt_t = t_steps.sqrt().ln();
    let log_2_delta = (2.0 / delta).ln();
    let log_1_delta = (1.0 / delta).ln();
    let noise_term = 12.0 * std::f64::consts::E.sqrt() * sigma_dp * log_1_delta.sqrt();
    let noise_cap = 27.0 * std::f64::consts::E.sqrt() * sigma_dp * log_1_delta.sqrt();
    Ok(match regime {
        ClipRegime::Body => {
            let first = 2.0 * root * k_scale * log_sqrt_t.sqrt();
            if 16.0 * root * k_scale * log_2_delta.sqrt() <= noise_term {
                first.max(noise_cap)
            } else {
                first.max(33.0 * root * k_scale * log_2_delta.sqrt())
            }
        }
        ClipRegime::Tail => {
            let first = 4f64.powf(theta) * 2.0 * k_scale * log_sqrt_t.powf(theta);
            if theta == 0.5 {
                if 16.0 * root * k_scale * log_2_delta.powf(theta) <= noise_term {
                    first.max(noise_cap)
                } else {
                    first.max(33.0 * root * k_scale * log_2_delta.sqrt())
                }
            } else {
                first.max(17.0 * k_scale * log_2_delta.powf(theta))
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::subspace::perturb_and_partition;

    fn random_batch(b: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> GradientBatch {
        let mut rows = ndarray::Array2::zeros((b, d));
        rows.mapv_inplace(|_| scale * rng.sample::<f64, _>(StandardNormal));
        GradientBatch::from_rows(rows)
    }

    /// Single-threshold average with one aggregate draw — the classic private
    /// aggregation, used as the degeneracy oracle.
    fn single_threshold_average(batch: &GradientBatch, c: f64) -> Array1<f64> {
        let mut sum = Array1::<f64>::zeros(batch.dim());
        for i in 0..batch.batch_size() {
            sum += &abadi_clip(&batch.per_sample.row(i), c);
        }
        sum / batch.batch_size() as f64
    }

    #[test]
    fn abadi_clip_reference_points() {
        let clipped = abadi_clip(&array![3.0, 4.0].view(), 1.0);
        assert_abs_diff_eq!(clipped[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(clipped[1], 0.8, epsilon = 1e-15);
        let inside = abadi_clip(&array![0.3, 0.4].view(), 1.0);
        assert_eq!(inside, array![0.3, 0.4]);
        let zero = abadi_clip(&array![0.0, 0.0].view(), 1.0);
        assert_eq!(zero, array![0.0, 0.0]);
        // An infinite threshold never rescales.
        let free = abadi_clip(&array![30.0, 40.0].view(), f64::INFINITY);
        assert_eq!(free, array![30.0, 40.0]);
    }

    #[test]
    fn auto_s_reference_points() {
        let zero = auto_s_normalize(&array![0.0, 0.0].view(), 1.0, 0.01);
        assert_eq!(zero, array![0.0, 0.0]);
        // ‖g‖ = γ gives output norm c/2.
        let g = array![0.01, 0.0];
        let out = auto_s_normalize(&g.view(), 1.0, 0.01);
        assert_relative_eq!(out.dot(&out).sqrt(), 0.5, max_relative = 1e-12);
        // Saturation: enormous norm approaches c from below.
        let big = array![1e9, 0.0];
        let out = auto_s_normalize(&big.view(), 1.0, 0.01);
        let norm = out.dot(&out).sqrt();
        assert!(norm < 1.0 && norm > 1.0 - 1e-8);
    }

    #[test]
    fn clip_contract_and_direction_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let d = rng.gen_range(1..12);
            let g: Array1<f64> =
                (0..d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let c = rng.gen_range(0.1..4.0);
            let clipped = abadi_clip(&g.view(), c);
            let gn = g.dot(&g).sqrt();
            let cn = clipped.dot(&clipped).sqrt();
            assert!(cn <= c * (1.0 + 1e-12));
            assert_relative_eq!(cn, gn.min(c), max_relative = 1e-12);
            // Nonnegative scalar multiple of the input.
            if gn > 0.0 {
                let cross = g.dot(&clipped);
                assert_relative_eq!(cross, gn * cn, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn config_constructors_enforce_domains() {
        assert!(ClippingConfig::discriminative(2.0, 1.0, 0.1).is_ok());
        assert!(ClippingConfig::discriminative(1.0, 1.0, 0.0).is_ok());
        assert!(matches!(
            ClippingConfig::discriminative(0.5, 1.0, 0.1),
            Err(ClipError::InvalidParameter { name: "c1", .. })
        ));
        assert!(matches!(
            ClippingConfig::discriminative(2.0, -1.0, 0.1),
            Err(ClipError::InvalidParameter { name: "c2", .. })
        ));
        assert!(matches!(
            ClippingConfig::discriminative(2.0, 1.0, 1.5),
            Err(ClipError::InvalidParameter { name: "p", .. })
        ));
        assert!(ClippingConfig::abadi(f64::INFINITY).is_ok());
        assert!(ClippingConfig::abadi(0.0).is_err());
        assert!(ClippingConfig::auto_s(f64::INFINITY).is_err());
    }

    #[test]
    fn discriminative_matches_hand_computed_planted_batch() {
        // B = 3, d = 2, σ_dp = 0: tail = {1} clipped at c1 = 2, body at c2 = 1.
        let rows = ndarray::array![
            [3.0, 4.0],   // norm 5, body → scaled to norm 1 → [0.6, 0.8]
            [0.0, 10.0],  // tail → clipped to norm 2 → [0, 2]
            [0.3, 0.0],   // body, inside the ball → unchanged
        ];
        let batch = GradientBatch::from_rows(rows);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Raw traces chosen so sample 1 is selected with p = 1/3, σ_tr = 0.
        let record = perturb_and_partition(&[0.2, 0.9, 0.1], 0.0, 1.0 / 3.0, &mut rng);
        assert_eq!(record.tail_indices, vec![1]);
        let cfg = ClippingConfig::discriminative(2.0, 1.0, 1.0 / 3.0).unwrap();
        let out =
            discriminative_step(&batch, &record, &cfg, 0.0, NoiseMode::PerSample, 7, 0).unwrap();
        let expected = array![(0.6 + 0.0 + 0.3) / 3.0, (0.8 + 2.0 + 0.0) / 3.0];
        assert_abs_diff_eq!(out[0], expected[0], epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], expected[1], epsilon = 1e-15);
    }

    #[test]
    fn degenerate_thresholds_reproduce_single_threshold_average_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..100 {
            let b = rng.gen_range(1..12);
            let d = rng.gen_range(1..8);
            let batch = random_batch(b, d, 2.0, &mut rng);
            let c = rng.gen_range(0.2..3.0);
            let p = rng.gen_range(0.0..=1.0);
            let traces: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let record = perturb_and_partition(&traces, 0.0, p, &mut rng);
            let cfg = ClippingConfig::discriminative(c, c, p).unwrap();
            let out = discriminative_step(
                &batch,
                &record,
                &cfg,
                0.0,
                NoiseMode::Aggregate,
                trial,
                0,
            )
            .unwrap();
            let reference = single_threshold_average(&batch, c);
            assert_eq!(out, reference, "trial {trial} diverged");
        }
    }

    #[test]
    fn empty_tail_uses_only_the_body_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(6, 3, 5.0, &mut rng);
        let record = perturb_and_partition(&[0.5; 6], 0.0, 0.0, &mut rng);
        let cfg = ClippingConfig::discriminative(100.0, 0.7, 0.0).unwrap();
        let out =
            discriminative_step(&batch, &record, &cfg, 0.0, NoiseMode::PerSample, 0, 0).unwrap();
        let reference = single_threshold_average(&batch, 0.7);
        assert_eq!(out, reference);
    }

    #[test]
    fn tail_retention_beats_single_threshold_on_aligned_instances() {
        // All tail gradients align with the true mean direction and exceed
        // c1; rescuing them at c1 > c2 must strictly increase the inner
        // product with that direction.
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut u: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = u.dot(&u).sqrt();
        u /= norm;
        let b = 10;
        let tail_count = 2;
        let mut rows = ndarray::Array2::zeros((b, d));
        let mut traces = Vec::with_capacity(b);
        for i in 0..b {
            if i < tail_count {
                rows.row_mut(i).assign(&(&u * 5.0));
                traces.push(0.9);
            } else {
                let small: Array1<f64> =
                    (0..d).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
                rows.row_mut(i).assign(&small);
                traces.push(0.1);
            }
        }
        let batch = GradientBatch::from_rows(rows);
        let record = perturb_and_partition(&traces, 0.0, 0.2, &mut rng);
        assert_eq!(record.tail_indices, vec![0, 1]);
        let (c1, c2) = (2.0, 1.0);
        let cfg = ClippingConfig::discriminative(c1, c2, 0.2).unwrap();
        let two_threshold =
            discriminative_step(&batch, &record, &cfg, 0.0, NoiseMode::PerSample, 0, 0).unwrap();
        let single = single_threshold_average(&batch, c2);
        assert!(
            two_threshold.dot(&u) > single.dot(&u),
            "{} vs {}",
            two_threshold.dot(&u),
            single.dot(&u)
        );
    }

    #[test]
    fn per_sample_noise_is_deterministic_per_step_and_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(4, 3, 1.0, &mut rng);
        let record = perturb_and_partition(&[0.9, 0.2, 0.4, 0.7], 0.0, 0.25, &mut rng);
        let cfg = ClippingConfig::discriminative(2.0, 1.0, 0.25).unwrap();
        let a =
            discriminative_step(&batch, &record, &cfg, 0.5, NoiseMode::PerSample, 42, 3).unwrap();
        let b =
            discriminative_step(&batch, &record, &cfg, 0.5, NoiseMode::PerSample, 42, 3).unwrap();
        assert_eq!(a, b);
        let c =
            discriminative_step(&batch, &record, &cfg, 0.5, NoiseMode::PerSample, 42, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partition_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(3, 2, 1.0, &mut rng);
        let record = perturb_and_partition(&[0.1, 0.2], 0.0, 0.5, &mut rng);
        let cfg = ClippingConfig::discriminative(1.0, 1.0, 0.5).unwrap();
        assert!(matches!(
            discriminative_step(&batch, &record, &cfg, 0.0, NoiseMode::PerSample, 0, 0),
            Err(ClipError::PartitionMismatch { record: 2, batch: 3 })
        ));
        let abadi_cfg = ClippingConfig::abadi(1.0).unwrap();
        let record3 = perturb_and_partition(&[0.1, 0.2, 0.3], 0.0, 0.5, &mut rng);
        assert!(matches!(
            discriminative_step(&batch, &record3, &abadi_cfg, 0.0, NoiseMode::PerSample, 0, 0),
            Err(ClipError::WrongMode { .. })
        ));
    }

    #[test]
    fn threshold_guidance_reference_ratios() {
        let c1 = threshold_guidance(2.0, 1e-5, 0.01).unwrap();
        assert_relative_eq!(c1 / 0.01, 11.180339887498949, max_relative = 1e-12);
        assert!((11.0..=11.4).contains(&(c1 / 0.01)));
        assert_eq!(threshold_guidance(0.5, 1e-5, 3.7).unwrap(), 3.7);
        let c1 = threshold_guidance(1.0, 1e-5, 1.0).unwrap();
        assert_relative_eq!(c1, 2.23606797749979, max_relative = 1e-12);
        assert!(threshold_guidance(0.3, 1e-5, 1.0).is_err());
        assert!(threshold_guidance(2.0, 0.0, 1.0).is_err());
        assert!(threshold_guidance(2.0, 1e-5, 0.0).is_err());
    }

    #[test]
    fn theoretical_c_reference_values() {
        // θ = 1/2 body with both logs equal to one: max(4, 66) = 66.
        let e2 = std::f64::consts::E * std::f64::consts::E;
        let body = theoretical_c(0.5, 1.0, e2, 2.0 / std::f64::consts::E, ClipRegime::Body).unwrap();
        assert_relative_eq!(body, 66.0, max_relative = 1e-12);
        // θ = 1 tail: max(8, 132) = 132.
        let tail = theoretical_c(1.0, 1.0, e2, 2.0 / std::f64::consts::E, ClipRegime::Tail).unwrap();
        assert_relative_eq!(tail, 132.0, max_relative = 1e-12);
        // Heavy-tail regime, frozen from direct evaluation.
        let body = theoretical_c(2.0, 1.5, 1000.0, 1e-5, ClipRegime::Body).unwrap();
        assert_relative_eq!(body, 31105.96944598622, max_relative = 1e-12);
        let tail = theoretical_c(2.0, 1.5, 1000.0, 1e-5, ClipRegime::Tail).unwrap();
        assert_relative_eq!(tail, 117998.66186694431, max_relative = 1e-12);
        assert!(theoretical_c(2.0, 1.0, 1.5, 1e-5, ClipRegime::Body).is_err());
    }

    #[test]
    fn theoretical_c_is_monotone_in_horizon_and_confidence() {
        for regime in [ClipRegime::Body, ClipRegime::Tail] {
            let mut last = 0.0;
            for t in [4.0, 16.0, 256.0, 65536.0] {
                let c = theoretical_c(1.5, 1.0, t, 1e-4, regime).unwrap();
                assert!(c >= last);
                last = c;
            }
            let mut last = 0.0;
            for delta in [1e-2, 1e-4, 1e-8] {
                let c = theoretical_c(1.5, 1.0, 100.0, delta, regime).unwrap();
                assert!(c >= last);
                last = c;
            }
        }
    }

    #[test]
    fn noise_adjusted_thresholds_follow_the_subcase_selection() {
        let e2 = std::f64::consts::E * std::f64::consts::E;
        // Large σ_dp activates the noise-dominated arm.
        let c = theoretical_c_noise_adjusted(0.5, 1.0, e2, 0.5, 10.0, ClipRegime::Body).unwrap();
        assert_relative_eq!(c, 370.615634037496, max_relative = 1e-12);
        // Small σ_dp falls back to the K-dominated arm.
        let c = theoretical_c_noise_adjusted(0.5, 1.0, e2, 0.5, 0.1, ClipRegime::Body).unwrap();
        assert_relative_eq!(c, 77.70906148602133, max_relative = 1e-12);
        // Tail regime at θ = 1/2 shares the selection rule.
        let c = theoretical_c_noise_adjusted(0.5, 1.0, e2, 0.5, 10.0, ClipRegime::Tail).unwrap();
        assert_relative_eq!(c, 370.615634037496, max_relative = 1e-12);
        // Tail regime above θ = 1/2 ignores σ_dp.
        let c = theoretical_c_noise_adjusted(
            2.0,
            1.0,
            e2,
            2.0 / std::f64::consts::E,
            5.0,
            ClipRegime::Tail,
        )
        .unwrap();
        assert_relative_eq!(c, 32.0, max_relative = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn clipped_norm_never_exceeds_threshold(
            coords in proptest::collection::vec(-50.0f64..50.0, 1..10),
            c in 0.01f64..10.0,
        ) {
            let g = Array1::from_vec(coords);
            let clipped = abadi_clip(&g.view(), c);
            let norm = clipped.dot(&clipped).sqrt();
            prop_assert!(norm <= c * (1.0 + 1e-12));
            let gn = g.dot(&g).sqrt();
            if gn >= c {
                prop_assert!((norm - c).abs() <= 1e-9 * c);
            } else {
                prop_assert_eq!(clipped, g);
            }
        }

        #[test]
        fn auto_s_norm_is_strictly_below_c_and_monotone(
            norm1 in 0.0f64..100.0,
            extra in 0.001f64..100.0,
            c in 0.1f64..5.0,
        ) {
            let g1 = array![norm1, 0.0];
            let g2 = array![norm1 + extra, 0.0];
            let o1 = auto_s_normalize(&g1.view(), c, 0.01);
            let o2 = auto_s_normalize(&g2.view(), c, 0.01);
            let n1 = o1.dot(&o1).sqrt();
            let n2 = o2.dot(&o2).sqrt();
            prop_assert!(n1 < c && n2 < c);
            prop_assert!(n2 > n1);
        }
    }
}
