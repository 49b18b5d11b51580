//! Small differentiable models with exact per-sample gradients, plus a
//! synthetic quadratic objective with sub-Weibull gradient noise.
//!
//! Three model families are supported, all with closed-form or manually
//! backpropagated per-sample gradients over flattened parameter vectors:
//!
//! * linear regression with squared loss ½(w·x − y)²,
//! * logistic regression — the stable sigmoid form for two classes, softmax
//!   cross-entropy for more,
//! * a one-hidden-layer MLP with tanh activation and softmax output.
//!
//! The synthetic objective is the quadratic field ∇L(w) = β·(w − w*): its
//! population gradient is exact at every iterate, which is what lets training
//! metrics be evaluated without estimation error. Per-sample noise adds
//! `r·u` to the population gradient, where `r` is a sub-Weibull magnitude and
//! `u` an independent uniform direction on the unit sphere, so the noise-norm
//! law matches the assumed distribution and the noise is mean-zero by
//! symmetry.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::subweibull::SubWeibullParams;

/// Raw norms at or below this are treated as zero gradients: the normalized
/// row is zeroed and flagged instead of dividing by a vanishing norm.
pub const ZERO_GRAD_NORM: f64 = 1e-300;

/// Errors from dataset construction and gradient evaluation.
#[derive(Debug)]
pub enum GradientError {
    /// A batch index points outside the dataset.
    BadIndex { index: usize, len: usize },
    /// The per-sample loss evaluated to NaN or infinity.
    NonFiniteLoss { sample: usize },
    /// Labels incompatible with the model (regression targets vs classes).
    WrongLabelKind { expected: &'static str },
    /// A class label at or above the declared class count.
    LabelOutOfRange { sample: usize, label: usize, classes: usize },
    /// Feature/weight dimensions disagree with the model descriptor.
    ShapeMismatch { expected: usize, found: usize },
    /// Dataset construction produced an empty class.
    EmptyClass { class: usize },
    /// Dataset construction rejected its configuration.
    BadDatasetConfig(String),
}

impl fmt::Display for GradientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientError::BadIndex { index, len } => {
                write!(f, "sample index {index} out of range for dataset of {len}")
            }
            GradientError::NonFiniteLoss { sample } => {
                write!(f, "non-finite loss at sample index {sample}")
            }
            GradientError::WrongLabelKind { expected } => {
                write!(f, "model expects {expected} labels")
            }
            GradientError::LabelOutOfRange { sample, label, classes } => {
                write!(f, "sample {sample} has label {label}, outside {classes} classes")
            }
            GradientError::ShapeMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            GradientError::EmptyClass { class } => {
                write!(f, "class {class} would receive zero samples")
            }
            GradientError::BadDatasetConfig(msg) => write!(f, "bad dataset config: {msg}"),
        }
    }
}

impl std::error::Error for GradientError {}

/// Per-sample labels: integer classes or real regression targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Targets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dataset of n feature rows with labels and (for class data) class counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Labels,
    pub class_counts: Vec<usize>,
}

impl Dataset {
    /// Validates shape agreement and finiteness of every feature row.
    pub fn new(features: Array2<f64>, labels: Labels) -> Result<Self, GradientError> {
        let n = features.nrows();
        if n == 0 {
            return Err(GradientError::BadDatasetConfig("dataset must have at least one row".into()));
        }
        if labels.len() != n {
            return Err(GradientError::ShapeMismatch { expected: n, found: labels.len() });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(GradientError::BadDatasetConfig("non-finite feature value".into()));
        }
        let class_counts = match &labels {
            Labels::Classes(ls) => {
                let max = ls.iter().copied().max().unwrap_or(0);
                let mut counts = vec![0usize; max + 1];
                for &l in ls {
                    counts[l] += 1;
                }
                counts
            }
            Labels::Targets(ts) => {
                if ts.iter().any(|v| !v.is_finite()) {
                    return Err(GradientError::BadDatasetConfig("non-finite target".into()));
                }
                Vec::new()
            }
        };
        Ok(Self { features, labels, class_counts })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Architecture descriptor; parameter vectors are flattened in the documented
/// layout of each variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Squared loss ½(w·x − y)²; d = features.
    LinearRegression { features: usize },
    /// Two classes: sigmoid over w·x, d = features. More classes: softmax
    /// cross-entropy with weights laid out row-major as W[class][feature],
    /// d = classes·features.
    LogisticRegression { features: usize, classes: usize },
    /// One tanh hidden layer and softmax output; layout
    /// [W1 (h×f), b1 (h), W2 (c×h), b2 (c)], d = h·(f+1) + c·(h+1).
    Mlp { features: usize, hidden: usize, classes: usize },
}

impl ModelKind {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelKind::LinearRegression { features } => features,
            ModelKind::LogisticRegression { features, classes } => {
                if classes == 2 {
                    features
                } else {
                    classes * features
                }
            }
            ModelKind::Mlp { features, hidden, classes } => {
                hidden * (features + 1) + classes * (hidden + 1)
            }
        }
    }

    fn feature_dim(&self) -> usize {
        match *self {
            ModelKind::LinearRegression { features }
            | ModelKind::LogisticRegression { features, .. }
            | ModelKind::Mlp { features, .. } => features,
        }
    }
}

/// A model kind together with its flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub weights: Array1<f64>,
}

impl Model {
    /// Zero-initialized parameters (the convex models train from zero).
    pub fn zeros(kind: ModelKind) -> Self {
        Self { kind, weights: Array1::zeros(kind.param_count()) }
    }

    /// Wraps an existing parameter vector, validating its length.
    pub fn with_weights(kind: ModelKind, weights: Array1<f64>) -> Result<Self, GradientError> {
        if weights.len() != kind.param_count() {
            return Err(GradientError::ShapeMismatch {
                expected: kind.param_count(),
                found: weights.len(),
            });
        }
        Ok(Self { kind, weights })
    }
}

/// Per-sample gradients for one minibatch, with norms and unit-normalized
/// copies. Rows whose norm is (numerically) zero keep a zero normalized row
/// and are flagged instead.
#[derive(Debug, Clone)]
pub struct GradientBatch {
    pub per_sample: Array2<f64>,
    pub norms: Vec<f64>,
    pub normalized: Array2<f64>,
    pub zero_flags: Vec<bool>,
}

impl GradientBatch {
    /// Builds norms, normalized rows, and zero flags from raw gradient rows.
    pub fn from_rows(per_sample: Array2<f64>) -> Self {
        let norms: Vec<f64> =
            per_sample.axis_iter(Axis(0)).map(|row| row.dot(&row).sqrt()).collect();
        let mut normalized = per_sample.clone();
        let mut zero_flags = vec![false; norms.len()];
        for (i, mut row) in normalized.axis_iter_mut(Axis(0)).enumerate() {
            if norms[i] > ZERO_GRAD_NORM {
                row.mapv_inplace(|v| v / norms[i]);
            } else {
                row.fill(0.0);
                zero_flags[i] = true;
            }
        }
        Self { per_sample, norms, normalized, zero_flags }
    }

    pub fn batch_size(&self) -> usize {
        self.per_sample.nrows()
    }

    pub fn dim(&self) -> usize {
        self.per_sample.ncols()
    }
}

fn class_label(labels: &Labels, i: usize) -> Result<usize, GradientError> {
    match labels {
        Labels::Classes(v) => Ok(v[i]),
        Labels::Targets(_) => Err(GradientError::WrongLabelKind { expected: "class" }),
    }
}

fn target_label(labels: &Labels, i: usize) -> Result<f64, GradientError> {
    match labels {
        Labels::Targets(v) => Ok(v[i]),
        Labels::Classes(_) => Err(GradientError::WrongLabelKind { expected: "real target" }),
    }
}

/// Stable binary cross-entropy: max(z,0) − z·y + ln(1 + e^(−|z|)).
fn sigmoid_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax probabilities and log-sum-exp of logits, max-subtracted.
fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|&e| e / sum).collect(), sum.ln() + m)
}

struct MlpSlices<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn mlp_slices<'a>(weights: &'a Array1<f64>, f: usize, h: usize, c: usize) -> MlpSlices<'a> {
    let w = weights.as_slice().expect("contiguous weights");
    let (w1, rest) = w.split_at(h * f);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(c * h);
    MlpSlices { w1, b1, w2, b2 }
}

/// Loss of one sample at the current weights.
pub fn sample_loss(model: &Model, data: &Dataset, i: usize) -> Result<f64, GradientError> {
    if i >= data.len() {
        return Err(GradientError::BadIndex { index: i, len: data.len() });
    }
    if data.feature_dim() != model.kind.feature_dim() {
        return Err(GradientError::ShapeMismatch {
            expected: model.kind.feature_dim(),
            found: data.feature_dim(),
        });
    }
    let x = data.features.row(i);
    let loss = match model.kind {
        ModelKind::LinearRegression { .. } => {
            let y = target_label(&data.labels, i)?;
            let r = model.weights.dot(&x) - y;
            0.5 * r * r
        }
        ModelKind::LogisticRegression { features, classes } => {
            let label = class_label(&data.labels, i)?;
            if label >= classes {
                return Err(GradientError::LabelOutOfRange { sample: i, label, classes });
            }
            if classes == 2 {
                sigmoid_loss(model.weights.dot(&x), label as f64)
            } else {
                let w = model.weights.as_slice().expect("contiguous weights");
                let xs = x.as_slice().expect("contiguous features");
                let logits: Vec<f64> = (0..classes)
                    .map(|cidx| dot(&w[cidx * features..(cidx + 1) * features], xs))
                    .collect();
                let (_, lse) = softmax(&logits);
                lse - logits[label]
            }
        }
        ModelKind::Mlp { features, hidden, classes } => {
            let label = class_label(&data.labels, i)?;
            if label >= classes {
                return Err(GradientError::LabelOutOfRange { sample: i, label, classes });
            }
            let s = mlp_slices(&model.weights, features, hidden, classes);
            let xs = x.as_slice().expect("contiguous features");
            let act: Vec<f64> = (0..hidden)
                .map(|j| (dot(&s.w1[j * features..(j + 1) * features], xs) + s.b1[j]).tanh())
                .collect();
            let logits: Vec<f64> =
                (0..classes).map(|cidx| dot(&s.w2[cidx * hidden..(cidx + 1) * hidden], &act) + s.b2[cidx]).collect();
            let (_, lse) = softmax(&logits);
            lse - logits[label]
        }
    };
    if !loss.is_finite() {
        return Err(GradientError::NonFiniteLoss { sample: i });
    }
    Ok(loss)
}

/// Mean loss over a batch of sample indices.
pub fn batch_mean_loss(model: &Model, batch: &[usize], data: &Dataset) -> Result<f64, GradientError> {
    let mut total = 0.0;
    for &i in batch {
        total += sample_loss(model, data, i)?;
    }
    Ok(total / batch.len().max(1) as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact gradient of the per-sample loss for every index in `batch`, row i of
/// the result belonging to `batch[i]`. Closed form for the convex models,
/// manual backpropagation for the MLP.
pub fn per_sample_gradients(
    model: &Model,
    batch: &[usize],
    data: &Dataset,
) -> Result<GradientBatch, GradientError> {
    let d = model.kind.param_count();
    if data.feature_dim() != model.kind.feature_dim() {
        return Err(GradientError::ShapeMismatch {
            expected: model.kind.feature_dim(),
            found: data.feature_dim(),
        });
    }
    let mut rows = Array2::zeros((batch.len(), d));
    for (bi, &i) in batch.iter().enumerate() {
        if i >= data.len() {
            return Err(GradientError::BadIndex { index: i, len: data.len() });
        }
        let x = data.features.row(i);
        let xs = x.as_slice().expect("contiguous features");
        let mut out = rows.row_mut(bi);
        let g = out.as_slice_mut().expect("contiguous gradient row");
        match model.kind {
            ModelKind::LinearRegression { .. } => {
                let y = target_label(&data.labels, i)?;
                let r = model.weights.dot(&x) - y;
                if !r.is_finite() {
                    return Err(GradientError::NonFiniteLoss { sample: i });
                }
                for (gj, &xj) in g.iter_mut().zip(xs) {
                    *gj = r * xj;
                }
            }
            ModelKind::LogisticRegression { features, classes } => {
                let label = class_label(&data.labels, i)?;
                if label >= classes {
                    return Err(GradientError::LabelOutOfRange { sample: i, label, classes });
                }
                let w = model.weights.as_slice().expect("contiguous weights");
                if classes == 2 {
                    let z = model.weights.dot(&x);
                    if !sigmoid_loss(z, label as f64).is_finite() {
                        return Err(GradientError::NonFiniteLoss { sample: i });
                    }
                    let err = sigmoid(z) - label as f64;
                    for (gj, &xj) in g.iter_mut().zip(xs) {
                        *gj = err * xj;
                    }
                } else {
                    let logits: Vec<f64> = (0..classes)
                        .map(|cidx| dot(&w[cidx * features..(cidx + 1) * features], xs))
                        .collect();
                    if logits.iter().any(|v| !v.is_finite()) {
                        return Err(GradientError::NonFiniteLoss { sample: i });
                    }
                    let (probs, _) = softmax(&logits);
                    for (cidx, &p) in probs.iter().enumerate() {
                        let err = p - if cidx == label { 1.0 } else { 0.0 };
                        for (gj, &xj) in g[cidx * features..(cidx + 1) * features].iter_mut().zip(xs) {
                            *gj = err * xj;
                        }
                    }
                }
            }
            ModelKind::Mlp { features, hidden, classes } => {
                let label = class_label(&data.labels, i)?;
                if label >= classes {
                    return Err(GradientError::LabelOutOfRange { sample: i, label, classes });
                }
                let s = mlp_slices(&model.weights, features, hidden, classes);
                let act: Vec<f64> = (0..hidden)
                    .map(|j| (dot(&s.w1[j * features..(j + 1) * features], xs) + s.b1[j]).tanh())
                    .collect();
                let logits: Vec<f64> = (0..classes)
                    .map(|cidx| dot(&s.w2[cidx * hidden..(cidx + 1) * hidden], &act) + s.b2[cidx])
                    .collect();
                if logits.iter().any(|v| !v.is_finite()) {
                    return Err(GradientError::NonFiniteLoss { sample: i });
                }
                let (probs, _) = softmax(&logits);
                let dz: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(cidx, &p)| p - if cidx == label { 1.0 } else { 0.0 })
                    .collect();
                // Backprop through W2/b2, then the tanh layer.
                let mut da = vec![0.0; hidden];
                for (cidx, &dzc) in dz.iter().enumerate() {
                    for j in 0..hidden {
                        da[j] += s.w2[cidx * hidden + j] * dzc;
                    }
                }
                let (gw1, grest) = g.split_at_mut(hidden * features);
                let (gb1, grest) = grest.split_at_mut(hidden);
                let (gw2, gb2) = grest.split_at_mut(classes * hidden);
                for j in 0..hidden {
                    let dh = da[j] * (1.0 - act[j] * act[j]);
                    gb1[j] = dh;
                    for (gj, &xj) in gw1[j * features..(j + 1) * features].iter_mut().zip(xs) {
                        *gj = dh * xj;
                    }
                }
                for (cidx, &dzc) in dz.iter().enumerate() {
                    gb2[cidx] = dzc;
                    for j in 0..hidden {
                        gw2[cidx * hidden + j] = dzc * act[j];
                    }
                }
            }
        }
    }
    Ok(GradientBatch::from_rows(rows))
}

/// Full-dataset statistics at the current weights: the exact mean gradient
/// ∇L_S(w), the mean loss, and classification accuracy (`None` for
/// regression).
#[derive(Debug, Clone)]
pub struct DatasetPass {
    pub mean_gradient: Array1<f64>,
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
}

/// First index of the largest value; ties resolve to the lower index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// One deterministic pass over the whole dataset: mean gradient, mean loss,
/// and accuracy where the model classifies. The convex models run on matrix
/// kernels; the MLP accumulates per-sample gradients in fixed-size chunks so
/// memory stays bounded.
pub fn dataset_pass(model: &Model, data: &Dataset) -> Result<DatasetPass, GradientError> {
    if data.is_empty() {
        return Err(GradientError::BadDatasetConfig("dataset must have at least one row".into()));
    }
    if data.feature_dim() != model.kind.feature_dim() {
        return Err(GradientError::ShapeMismatch {
            expected: model.kind.feature_dim(),
            found: data.feature_dim(),
        });
    }
    let n = data.len();
    let nf = n as f64;
    match model.kind {
        ModelKind::LinearRegression { .. } => {
            let targets = match &data.labels {
                Labels::Targets(t) => t,
                Labels::Classes(_) => {
                    return Err(GradientError::WrongLabelKind { expected: "real target" })
                }
            };
            let mut residual = data.features.dot(&model.weights);
            for (r, &y) in residual.iter_mut().zip(targets) {
                *r -= y;
            }
            if let Some(bad) = residual.iter().position(|v| !v.is_finite()) {
                return Err(GradientError::NonFiniteLoss { sample: bad });
            }
            let mean_loss = 0.5 * residual.dot(&residual) / nf;
            let mean_gradient = data.features.t().dot(&residual) / nf;
            Ok(DatasetPass { mean_gradient, mean_loss, accuracy: None })
        }
        ModelKind::LogisticRegression { classes, .. } if classes == 2 => {
            let z = data.features.dot(&model.weights);
            let mut errs = Array1::zeros(n);
            let mut loss = 0.0;
            let mut correct = 0usize;
            for i in 0..n {
                let label = class_label(&data.labels, i)?;
                if label >= classes {
                    return Err(GradientError::LabelOutOfRange { sample: i, label, classes });
                }
                let li = sigmoid_loss(z[i], label as f64);
                if !li.is_finite() {
                    return Err(GradientError::NonFiniteLoss { sample: i });
                }
                loss += li;
                errs[i] = sigmoid(z[i]) - label as f64;
                // argmax over {1 − p, p}: class 1 only on strictly positive logit.
                if (z[i] > 0.0) as usize == label {
                    correct += 1;
                }
            }
            let mean_gradient = data.features.t().dot(&errs) / nf;
            Ok(DatasetPass {
                mean_gradient,
                mean_loss: loss / nf,
                accuracy: Some(correct as f64 / nf),
            })
        }
        ModelKind::LogisticRegression { features, classes } => {
            let w = model.weights.as_slice().expect("contiguous weights");
            let wmat = ArrayView2::from_shape((classes, features), w)
                .expect("weight length validated at construction");
            let logits = data.features.dot(&wmat.t());
            let mut errs = Array2::zeros((n, classes));
            let mut loss = 0.0;
            let mut correct = 0usize;
            for i in 0..n {
                let label = class_label(&data.labels, i)?;
                if label >= classes {
                    return Err(GradientError::LabelOutOfRange { sample: i, label, classes });
                }
                let row = logits.row(i);
                let zs = row.as_slice().expect("contiguous logits row");
                if zs.iter().any(|v| !v.is_finite()) {
                    return Err(GradientError::NonFiniteLoss { sample: i });
                }
                let (probs, lse) = softmax(zs);
                loss += lse - zs[label];
                if argmax(zs) == label {
                    correct += 1;
                }
                for (c, &p) in probs.iter().enumerate() {
                    errs[(i, c)] = p - if c == label { 1.0 } else { 0.0 };
                }
            }
            let grad = errs.t().dot(&data.features) / nf;
            let mean_gradient = Array1::from_iter(grad.iter().cloned());
            Ok(DatasetPass {
                mean_gradient,
                mean_loss: loss / nf,
                accuracy: Some(correct as f64 / nf),
            })
        }
        ModelKind::Mlp { features, hidden, classes } => {
            const CHUNK: usize = 256;
            let mut grad_sum = Array1::zeros(model.kind.param_count());
            let mut loss = 0.0;
            let mut correct = 0usize;
            let s = mlp_slices(&model.weights, features, hidden, classes);
            let mut start = 0;
            while start < n {
                let end = (start + CHUNK).min(n);
                let chunk: Vec<usize> = (start..end).collect();
                let gb = per_sample_gradients(model, &chunk, data)?;
                grad_sum += &gb.per_sample.sum_axis(Axis(0));
                start = end;
            }
            for i in 0..n {
                let label = class_label(&data.labels, i)?;
                let x = data.features.row(i);
                let xs = x.as_slice().expect("contiguous features");
                let act: Vec<f64> = (0..hidden)
                    .map(|j| (dot(&s.w1[j * features..(j + 1) * features], xs) + s.b1[j]).tanh())
                    .collect();
                let zs: Vec<f64> = (0..classes)
                    .map(|c| dot(&s.w2[c * hidden..(c + 1) * hidden], &act) + s.b2[c])
                    .collect();
                if zs.iter().any(|v| !v.is_finite()) {
                    return Err(GradientError::NonFiniteLoss { sample: i });
                }
                let (_, lse) = softmax(&zs);
                loss += lse - zs[label];
                if argmax(&zs) == label {
                    correct += 1;
                }
            }
            Ok(DatasetPass {
                mean_gradient: grad_sum / nf,
                mean_loss: loss / nf,
                accuracy: Some(correct as f64 / nf),
            })
        }
    }
}

/// Quadratic objective ∇L(w) = β·(w − w*) with sub-Weibull per-sample
/// gradient noise; `noise = None` is the noiseless degenerate case.
#[derive(Debug, Clone)]
pub struct SyntheticObjective {
    pub true_minimizer: Array1<f64>,
    pub curvature: f64,
    pub noise: Option<SubWeibullParams>,
    pub grad_norm_cap: f64,
}

impl SyntheticObjective {
    pub fn new(
        true_minimizer: Array1<f64>,
        curvature: f64,
        noise: Option<SubWeibullParams>,
        grad_norm_cap: f64,
    ) -> Result<Self, GradientError> {
        if !(curvature.is_finite() && curvature > 0.0) {
            return Err(GradientError::BadDatasetConfig(format!(
                "curvature must be positive, got {curvature}"
            )));
        }
        if !(grad_norm_cap.is_finite() && grad_norm_cap > 0.0) {
            return Err(GradientError::BadDatasetConfig(format!(
                "gradient norm cap must be positive, got {grad_norm_cap}"
            )));
        }
        if true_minimizer.iter().any(|v| !v.is_finite()) {
            return Err(GradientError::BadDatasetConfig("non-finite minimizer".into()));
        }
        Ok(Self { true_minimizer, curvature, noise, grad_norm_cap })
    }

    pub fn dim(&self) -> usize {
        self.true_minimizer.len()
    }

    /// Population gradient β·(w − w*).
    pub fn population_grad(&self, w: &Array1<f64>) -> Array1<f64> {
        (w - &self.true_minimizer) * self.curvature
    }

    /// Squared-norm of the population gradient compared against the declared
    /// cap G; used by callers in assertion mode only.
    pub fn within_grad_cap(&self, w: &Array1<f64>) -> bool {
        let g = self.population_grad(w);
        g.dot(&g) <= self.grad_norm_cap
    }

    /// One noisy sample gradient and the population gradient at `w`. The
    /// noise is `r·u` with `r` a sub-Weibull magnitude and `u` uniform on the
    /// unit sphere.
    pub fn synthetic_gradient<R: Rng + ?Sized>(
        &self,
        w: &Array1<f64>,
        rng: &mut R,
    ) -> (Array1<f64>, Array1<f64>) {
        let true_grad = self.population_grad(w);
        let noisy = match &self.noise {
            None => true_grad.clone(),
            Some(params) => {
                let r = params.sample(rng).abs();
                let dir = unit_direction(self.dim(), rng);
                &true_grad + &(dir * r)
            }
        };
        (noisy, true_grad)
    }
}

/// Uniform random direction on the unit sphere (normalized Gaussian vector).
fn unit_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Builds a class-imbalanced Gaussian-blob dataset: class c receives
/// `round(max_count·decay^c)` samples with unit-variance features around a
/// distinct basis-direction mean, mirroring exponential class-count profiles
/// of heavy-tailed benchmarks. `decay = 1` keeps all classes equal.
pub fn make_imbalanced_dataset<R: Rng + ?Sized>(
    n_classes: usize,
    max_count: usize,
    decay: f64,
    feature_dim: usize,
    rng: &mut R,
) -> Result<Dataset, GradientError> {
    if n_classes < 2 {
        return Err(GradientError::BadDatasetConfig("need at least two classes".into()));
    }
    if max_count < n_classes {
        return Err(GradientError::BadDatasetConfig("max_count below class count".into()));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(GradientError::BadDatasetConfig(format!("decay must be in (0, 1], got {decay}")));
    }
    if feature_dim < n_classes {
        return Err(GradientError::BadDatasetConfig(format!(
            "feature_dim {feature_dim} must be at least n_classes {n_classes} for separated means"
        )));
    }
    let counts: Vec<usize> =
        (0..n_classes).map(|c| (max_count as f64 * decay.powi(c as i32)).round() as usize).collect();
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(GradientError::EmptyClass { class: c });
    }
    let total: usize = counts.iter().sum();
    let mut features = Array2::zeros((total, feature_dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut r = features.row_mut(row);
            for (j, v) in r.iter_mut().enumerate() {
                *v = rng.sample::<f64, _>(StandardNormal) + if j == c { 1.0 } else { 0.0 };
            }
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(features, Labels::Classes(labels))
}

/// Builds a synthetic image-classification set: each class has a fixed
/// prototype pattern with pixel values in [0, 1]; samples are the prototype
/// under a random brightness factor plus clamped pixel noise. Class sizes
/// follow a geometric `decay` profile apportioned to sum to exactly `total`
/// (largest-remainder rounding, ties to the lower class). The brightness
/// spread and class imbalance together give per-sample gradient norms a
/// heavy right tail once the common classes are fit.
pub fn make_image_blobs<R: Rng + ?Sized>(
    n_classes: usize,
    total: usize,
    decay: f64,
    side: usize,
    pixel_noise: f64,
    rng: &mut R,
) -> Result<Dataset, GradientError> {
    if n_classes < 2 {
        return Err(GradientError::BadDatasetConfig("need at least two classes".into()));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(GradientError::BadDatasetConfig(format!("decay must be in (0, 1], got {decay}")));
    }
    if side == 0 {
        return Err(GradientError::BadDatasetConfig("side must be positive".into()));
    }
    if !(pixel_noise >= 0.0 && pixel_noise.is_finite()) {
        return Err(GradientError::BadDatasetConfig(format!(
            "pixel_noise must be finite and nonnegative, got {pixel_noise}"
        )));
    }
    let counts = apportion_geometric(n_classes, total, decay)?;
    let dim = side * side;
    // Prototypes first, in class order, so counts do not shift the patterns.
    let mut prototypes = Array2::zeros((n_classes, dim));
    prototypes.mapv_inplace(|_| rng.gen_range(0.0..1.0));

    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (c, &count) in counts.iter().enumerate() {
        let proto = prototypes.row(c);
        for _ in 0..count {
            let brightness = rng.gen_range(0.6..1.3);
            let mut r = features.row_mut(row);
            for (v, &p) in r.iter_mut().zip(proto.iter()) {
                let noise: f64 = rng.sample(StandardNormal);
                *v = (brightness * p + pixel_noise * noise).clamp(0.0, 1.0);
            }
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(features, Labels::Classes(labels))
}

/// Largest-remainder apportionment of `total` over geometric weights
/// decay^c; every class must end up nonempty.
fn apportion_geometric(
    n_classes: usize,
    total: usize,
    decay: f64,
) -> Result<Vec<usize>, GradientError> {
    let weights: Vec<f64> = (0..n_classes).map(|c| decay.powi(c as i32)).collect();
    let weight_sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / weight_sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(total - assigned) {
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(GradientError::EmptyClass { class: c });
    }
    Ok(counts)
}
