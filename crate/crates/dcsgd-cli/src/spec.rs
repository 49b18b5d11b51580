//! Experiment spec files: flat `key = value` defaults at the top, followed
//! by `[variant.1]`, `[variant.2]`, … sections that override them. Grids are
//! the common case, so every run parameter can live once in the defaults and
//! each variant states only its own axis values. Diagnostics carry 1-based
//! line and column positions.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use dcsgd::clipping::{ClipMode, ClippingConfig, NoiseMode};
use dcsgd::trainer::LrSchedule;

/// A spec-file diagnostic anchored to a position in the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for SpecError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Dpsgd,
    DcDpsgd,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Dpsgd => "dpsgd",
            Algorithm::DcDpsgd => "dc-dpsgd",
        }
    }
}

/// Model architecture declared by a data-target spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelDecl {
    Logistic { classes: usize },
    Linear,
    Mlp { hidden: usize, classes: usize },
}

/// What a variant trains on, before datasets are resolved from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetDecl {
    Synthetic {
        dim: usize,
        theta: f64,
        k_scale: f64,
        distance: f64,
        curvature: f64,
        /// Population size the accountant charges against (q = B/n_virtual).
        n_virtual: usize,
    },
    Data {
        dataset: String,
        model: ModelDecl,
    },
}

/// One fully resolved grid variant (defaults merged with its section).
#[derive(Debug, Clone)]
pub struct VariantDef {
    pub label: String,
    pub algorithm: Algorithm,
    pub clipping: ClippingConfig,
    pub noise_mode: NoiseMode,
    /// Fraction of the total budget spent on traces; forced to 0 for the
    /// single-threshold algorithm, which has no trace stage.
    pub split_fraction_tr: f64,
    pub eps_total: f64,
    pub delta: f64,
    pub t_steps: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub subspace_k: usize,
    pub subspace_theta: f64,
    pub poisson: bool,
    pub target: TargetDecl,
}

/// A named experiment grid: variants × seeds.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantDef>,
}

#[derive(Debug, Clone, Copy)]
struct Entry<'a> {
    value: &'a str,
    line: usize,
    col: usize,
}

type Scope<'a> = HashMap<&'a str, Entry<'a>>;

const GLOBAL_ONLY_KEYS: [&str; 3] = ["name", "output_dir", "seeds"];

const RUN_KEYS: [&str; 26] = [
    "label",
    "algorithm",
    "clip_mode",
    "c",
    "c1",
    "c2",
    "p",
    "noise_mode",
    "split_fraction_tr",
    "eps_total",
    "delta",
    "t_steps",
    "epochs",
    "batch_size",
    "lr",
    "lr_schedule",
    "subspace_k",
    "subspace_theta",
    "poisson",
    "target",
    "dim",
    "theta",
    "k_scale",
    "distance",
    "curvature",
    "n_virtual",
];

const DATA_KEYS: [&str; 4] = ["dataset", "model", "classes", "hidden"];

fn known_key(key: &str) -> bool {
    GLOBAL_ONLY_KEYS.contains(&key) || RUN_KEYS.contains(&key) || DATA_KEYS.contains(&key)
}

fn err(line: usize, col: usize, message: impl Into<String>) -> SpecError {
    SpecError { line, col, message: message.into() }
}

impl ExperimentSpec {
    /// Parses the full spec text, merging defaults into each variant and
    /// validating every field.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let (globals, variant_scopes) = scan_sections(text)?;
        if variant_scopes.is_empty() {
            return Err(err(1, 1, "spec declares no [variant.1] section"));
        }

        let top = Resolver { globals: &globals, local: None, section_line: 1 };
        let name = top.require("name")?.value.to_string();
        check_artifact_name(&name, top.require("name")?)?;
        let output_dir = globals.get("output_dir").map(|e| PathBuf::from(e.value));
        let seeds_entry = top.require("seeds")?;
        let seeds = parse_u64_list(seeds_entry)?;
        if seeds.is_empty() {
            return Err(err(seeds_entry.line, seeds_entry.col, "seed list is empty"));
        }
        for (i, s) in seeds.iter().enumerate() {
            if seeds[..i].contains(s) {
                return Err(err(
                    seeds_entry.line,
                    seeds_entry.col,
                    format!("duplicate seed {s}; seeds must be distinct"),
                ));
            }
        }

        let mut variants = Vec::with_capacity(variant_scopes.len());
        for (index, (section_line, scope)) in variant_scopes.iter().enumerate() {
            let r = Resolver { globals: &globals, local: Some(scope), section_line: *section_line };
            let variant = build_variant(&r, index)?;
            if let Some(prev) = variants.iter().find(|v: &&VariantDef| v.label == variant.label) {
                return Err(err(
                    *section_line,
                    1,
                    format!("variant label `{}` already used; labels must be distinct", prev.label),
                ));
            }
            variants.push(variant);
        }
        Ok(ExperimentSpec { name, output_dir, seeds, variants })
    }
}

/// First pass: split the text into the global scope and one scope per
/// `[variant.N]` section, recording positions and rejecting unknown or
/// duplicated keys.
fn scan_sections(text: &str) -> Result<(Scope<'_>, Vec<(usize, Scope<'_>)>), SpecError> {
    let mut globals: Scope = HashMap::new();
    let mut variants: Vec<(usize, Scope)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = line.len() - line.trim_start().len();
        if trimmed.starts_with('[') {
            let expected = variants.len() + 1;
            let want = format!("[variant.{expected}]");
            if trimmed != want {
                return Err(err(
                    line_no,
                    indent + 1,
                    format!("expected section header `{want}`, found `{trimmed}`"),
                ));
            }
            variants.push((line_no, HashMap::new()));
            continue;
        }
        let eq = match line.find('=') {
            Some(pos) => pos,
            None => {
                return Err(err(line_no, indent + 1, "expected `key = value` or a section header"))
            }
        };
        let key = line[..eq].trim();
        if key.is_empty() {
            return Err(err(line_no, indent + 1, "missing key before `=`"));
        }
        let value_region = &line[eq + 1..];
        let value = value_region.trim();
        let value_col = eq + 1 + (value_region.len() - value_region.trim_start().len()) + 1;
        if value.is_empty() {
            return Err(err(line_no, value_col, format!("empty value for key `{key}`")));
        }
        let key_col = indent + 1;
        if !known_key(key) {
            return Err(err(line_no, key_col, format!("unknown key `{key}`")));
        }
        let entry = Entry { value, line: line_no, col: value_col };
        match variants.last_mut() {
            Some((_, scope)) => {
                if GLOBAL_ONLY_KEYS.contains(&key) {
                    return Err(err(
                        line_no,
                        key_col,
                        format!("key `{key}` is only valid before the first variant section"),
                    ));
                }
                if scope.insert(key, entry).is_some() {
                    return Err(err(line_no, key_col, format!("duplicate key `{key}` in this section")));
                }
            }
            None => {
                if key == "label" {
                    return Err(err(line_no, key_col, "`label` is only valid inside a variant section"));
                }
                if globals.insert(key, entry).is_some() {
                    return Err(err(line_no, key_col, format!("duplicate key `{key}` in the defaults")));
                }
            }
        }
    }
    Ok((globals, variants))
}

/// Key lookup over a variant scope chained onto the defaults.
struct Resolver<'a> {
    globals: &'a Scope<'a>,
    local: Option<&'a Scope<'a>>,
    section_line: usize,
}

impl<'a> Resolver<'a> {
    fn get(&self, key: &str) -> Option<Entry<'a>> {
        self.local.and_then(|s| s.get(key)).or_else(|| self.globals.get(key)).copied()
    }

    fn require(&self, key: &str) -> Result<Entry<'a>, SpecError> {
        self.get(key)
            .ok_or_else(|| err(self.section_line, 1, format!("missing required key `{key}`")))
    }

    fn f64(&self, key: &str) -> Result<f64, SpecError> {
        parse_f64(self.require(key)?)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, SpecError> {
        self.get(key).map(parse_f64).unwrap_or(Ok(default))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, SpecError> {
        self.get(key).map(parse_usize).unwrap_or(Ok(default))
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64, SpecError> {
        self.get(key).map(parse_u64).unwrap_or(Ok(default))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, SpecError> {
        match self.get(key) {
            None => Ok(default),
            Some(e) => match e.value {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(err(e.line, e.col, format!("expected true or false, got `{other}`"))),
            },
        }
    }
}

fn parse_f64(e: Entry<'_>) -> Result<f64, SpecError> {
    e.value
        .parse::<f64>()
        .map_err(|_| err(e.line, e.col, format!("expected a number, got `{}`", e.value)))
}

fn parse_usize(e: Entry<'_>) -> Result<usize, SpecError> {
    e.value
        .parse::<usize>()
        .map_err(|_| err(e.line, e.col, format!("expected a nonnegative integer, got `{}`", e.value)))
}

fn parse_u64(e: Entry<'_>) -> Result<u64, SpecError> {
    e.value
        .parse::<u64>()
        .map_err(|_| err(e.line, e.col, format!("expected a nonnegative integer, got `{}`", e.value)))
}

fn parse_u64_list(e: Entry<'_>) -> Result<Vec<u64>, SpecError> {
    e.value
        .split(',')
        .map(|part| {
            part.trim().parse::<u64>().map_err(|_| {
                err(e.line, e.col, format!("expected comma-separated integers, got `{}`", e.value))
            })
        })
        .collect()
}

/// Labels and dataset names become directory and file names, so they are
/// restricted to a safe character set.
fn check_artifact_name(name: &str, e: Entry<'_>) -> Result<(), SpecError> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(err(
            e.line,
            e.col,
            format!("`{name}` may only contain letters, digits, `-`, `_`, and `.`"),
        ))
    }
}

fn build_variant(r: &Resolver<'_>, index: usize) -> Result<VariantDef, SpecError> {
    let algorithm_entry = r.require("algorithm")?;
    let algorithm = match algorithm_entry.value {
        "dpsgd" => Algorithm::Dpsgd,
        "dc-dpsgd" => Algorithm::DcDpsgd,
        other => {
            return Err(err(
                algorithm_entry.line,
                algorithm_entry.col,
                format!("unknown algorithm `{other}` (expected dpsgd or dc-dpsgd)"),
            ))
        }
    };

    let label = match r.get("label") {
        Some(e) => {
            check_artifact_name(e.value, e)?;
            e.value.to_string()
        }
        None => format!("variant-{}", index + 1),
    };

    let target = build_target(r)?;

    let default_mode = match algorithm {
        Algorithm::Dpsgd => ClipMode::Abadi,
        Algorithm::DcDpsgd => ClipMode::Discriminative,
    };
    let clip_mode = match r.get("clip_mode") {
        None => default_mode,
        Some(e) => match e.value {
            "abadi" => ClipMode::Abadi,
            "auto-s" => ClipMode::AutoS,
            "discriminative" => ClipMode::Discriminative,
            other => {
                return Err(err(
                    e.line,
                    e.col,
                    format!("unknown clip_mode `{other}` (expected abadi, auto-s, or discriminative)"),
                ))
            }
        },
    };
    match (algorithm, clip_mode) {
        (Algorithm::DcDpsgd, ClipMode::Discriminative) => {}
        (Algorithm::DcDpsgd, _) => {
            let e = r.require("clip_mode")?;
            return Err(err(e.line, e.col, "dc-dpsgd requires clip_mode = discriminative"));
        }
        (Algorithm::Dpsgd, ClipMode::Discriminative) => {
            let e = r.require("clip_mode")?;
            return Err(err(e.line, e.col, "dpsgd requires clip_mode abadi or auto-s"));
        }
        (Algorithm::Dpsgd, _) => {}
    }

    let clipping = match clip_mode {
        ClipMode::Abadi => {
            let e = r.require("c")?;
            ClippingConfig::abadi(parse_f64(e)?).map_err(|why| err(e.line, e.col, why.to_string()))?
        }
        ClipMode::AutoS => {
            let e = r.require("c")?;
            ClippingConfig::auto_s(parse_f64(e)?).map_err(|why| err(e.line, e.col, why.to_string()))?
        }
        ClipMode::Discriminative => {
            let c1_entry = r.require("c1")?;
            let c1 = parse_f64(c1_entry)?;
            let c2 = r.f64("c2")?;
            let p = r.f64("p")?;
            ClippingConfig::discriminative(c1, c2, p)
                .map_err(|why| err(c1_entry.line, c1_entry.col, why.to_string()))?
        }
    };

    let noise_mode = match r.get("noise_mode") {
        None => NoiseMode::PerSample,
        Some(e) => match e.value {
            "per-sample" => NoiseMode::PerSample,
            "aggregate" => NoiseMode::Aggregate,
            other => {
                return Err(err(
                    e.line,
                    e.col,
                    format!("unknown noise_mode `{other}` (expected per-sample or aggregate)"),
                ))
            }
        },
    };

    // The single-threshold algorithm has no trace stage to fund.
    let split_fraction_tr = match algorithm {
        Algorithm::DcDpsgd => {
            let e = r.require("split_fraction_tr")?;
            let f = parse_f64(e)?;
            if !(0.0..1.0).contains(&f) {
                return Err(err(e.line, e.col, format!("split_fraction_tr must be in [0, 1), got {f}")));
            }
            f
        }
        Algorithm::Dpsgd => 0.0,
    };

    let eps_entry = r.require("eps_total")?;
    let eps_total = parse_f64(eps_entry)?;
    if !(eps_total.is_finite() && eps_total > 0.0) {
        return Err(err(eps_entry.line, eps_entry.col, format!("eps_total must be positive, got {eps_total}")));
    }
    let delta_entry = r.require("delta")?;
    let delta = parse_f64(delta_entry)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(err(delta_entry.line, delta_entry.col, format!("delta must be in (0, 1), got {delta}")));
    }

    let t_entry = r.require("t_steps")?;
    let t_steps = parse_u64(t_entry)?;
    if t_steps == 0 {
        return Err(err(t_entry.line, t_entry.col, "t_steps must be at least 1"));
    }
    let epochs = r.u64_or("epochs", 1)?;
    let b_entry = r.require("batch_size")?;
    let batch_size = parse_usize(b_entry)?;
    if batch_size == 0 {
        return Err(err(b_entry.line, b_entry.col, "batch_size must be at least 1"));
    }

    let lr_entry = r.require("lr")?;
    let lr_base = parse_f64(lr_entry)?;
    if !(lr_base.is_finite() && lr_base > 0.0) {
        return Err(err(lr_entry.line, lr_entry.col, format!("lr must be positive, got {lr_base}")));
    }
    let lr = match r.get("lr_schedule") {
        None => LrSchedule::Constant(lr_base),
        Some(e) => match e.value {
            "constant" => LrSchedule::Constant(lr_base),
            "inv-sqrt-t" => LrSchedule::InvSqrtT(lr_base),
            other => {
                return Err(err(
                    e.line,
                    e.col,
                    format!("unknown lr_schedule `{other}` (expected constant or inv-sqrt-t)"),
                ))
            }
        },
    };

    let subspace_k = match algorithm {
        Algorithm::DcDpsgd => {
            let e = r.require("subspace_k")?;
            let k = parse_usize(e)?;
            if k == 0 {
                return Err(err(e.line, e.col, "subspace_k must be at least 1"));
            }
            k
        }
        Algorithm::Dpsgd => r.usize_or("subspace_k", 1)?,
    };
    let theta_entry = r.get("subspace_theta");
    let subspace_theta = r.f64_or("subspace_theta", 2.0)?;
    if subspace_theta < 0.5 {
        let e = theta_entry.expect("non-default subspace_theta has an entry");
        return Err(err(e.line, e.col, format!("subspace_theta must be at least 0.5, got {subspace_theta}")));
    }
    let poisson = r.bool_or("poisson", false)?;

    Ok(VariantDef {
        label,
        algorithm,
        clipping,
        noise_mode,
        split_fraction_tr,
        eps_total,
        delta,
        t_steps,
        epochs,
        batch_size,
        lr,
        subspace_k,
        subspace_theta,
        poisson,
        target,
    })
}

fn build_target(r: &Resolver<'_>) -> Result<TargetDecl, SpecError> {
    let target_entry = r.require("target")?;
    match target_entry.value {
        "synthetic" => {
            let dim_entry = r.require("dim")?;
            let dim = parse_usize(dim_entry)?;
            if dim == 0 {
                return Err(err(dim_entry.line, dim_entry.col, "dim must be at least 1"));
            }
            let theta = r.f64("theta")?;
            let k_scale = r.f64_or("k_scale", 1.0)?;
            let distance = r.f64("distance")?;
            let curvature = r.f64_or("curvature", 1.0)?;
            let n_entry = r.require("n_virtual")?;
            let n_virtual = parse_usize(n_entry)?;
            if n_virtual == 0 {
                return Err(err(n_entry.line, n_entry.col, "n_virtual must be at least 1"));
            }
            Ok(TargetDecl::Synthetic { dim, theta, k_scale, distance, curvature, n_virtual })
        }
        "data" => {
            let ds_entry = r.require("dataset")?;
            check_artifact_name(ds_entry.value, ds_entry)?;
            let model_entry = r.require("model")?;
            let model = match model_entry.value {
                "logistic" => {
                    let classes = r.usize_or("classes", 10)?;
                    if classes < 2 {
                        let e = r.require("classes")?;
                        return Err(err(e.line, e.col, "classes must be at least 2"));
                    }
                    ModelDecl::Logistic { classes }
                }
                "linear" => ModelDecl::Linear,
                "mlp" => {
                    let h_entry = r.require("hidden")?;
                    let hidden = parse_usize(h_entry)?;
                    if hidden == 0 {
                        return Err(err(h_entry.line, h_entry.col, "hidden must be at least 1"));
                    }
                    let classes = r.usize_or("classes", 10)?;
                    if classes < 2 {
                        let e = r.require("classes")?;
                        return Err(err(e.line, e.col, "classes must be at least 2"));
                    }
                    ModelDecl::Mlp { hidden, classes }
                }
                other => {
                    return Err(err(
                        model_entry.line,
                        model_entry.col,
                        format!("unknown model `{other}` (expected logistic, linear, or mlp)"),
                    ))
                }
            };
            Ok(TargetDecl::Data { dataset: ds_entry.value.to_string(), model })
        }
        other => Err(err(
            target_entry.line,
            target_entry.col,
            format!("unknown target `{other}` (expected synthetic or data)"),
        )),
    }
}
