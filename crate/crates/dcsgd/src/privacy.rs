//! Privacy budget accounting: the closed-form noise calibration
//! σ² = m₂·T·q²·ln(1/δ)/ε² applied independently to the trace budget ε_tr
//! and the gradient budget ε_dp, the ε = ε_tr + ε_dp split, and a per-run
//! spend ledger enforcing single-spend discipline on output directories.
//!
//! The calibration constant m₂ inherits from the moments accountant and is
//! never pinned down analytically; it defaults to 1.25, is always recorded
//! in the ledger, and can be overridden. No independent RDP accountant is
//! implemented — the closed form is the single source of σ — but the
//! calibrate entry point is the seam where one would slot in.
//!
//! A zero trace budget does not produce an infinite σ sentinel: the trace
//! perturbation stage is disabled instead and the ledger records the run as
//! non-private on the trace side. A zero gradient budget is rejected
//! outright, since training without gradient noise has no privacy story.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Default moments-accountant constant used when a run does not override it.
pub const DEFAULT_M2: f64 = 1.25;

/// Default feasibility constant for the ε ≤ m₁·q²·T guard. The analysis
/// leaves m₁ unspecified, so violations warn rather than fail.
pub const DEFAULT_M1: f64 = 2.0;

/// Errors from budget construction, calibration, and the spend ledger.
#[derive(Debug)]
pub enum PrivacyError {
    /// A budget or calibration parameter outside its domain.
    InvalidParameter { name: &'static str, value: f64 },
    /// Training must carry gradient noise; ε_dp = 0 is not calibratable.
    ZeroGradientBudget,
    /// The output directory already holds a ledger and no override was given.
    LedgerConflict { path: PathBuf },
    /// Ledger file I/O failure.
    Io(std::io::Error),
    /// A persisted ledger failed to parse back.
    MalformedLedger { path: PathBuf, line: usize, reason: String },
}

impl fmt::Display for PrivacyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrivacyError::InvalidParameter { name, value } => {
                write!(f, "invalid privacy parameter {name} = {value}")
            }
            PrivacyError::ZeroGradientBudget => {
                write!(f, "gradient budget eps_dp must be positive")
            }
            PrivacyError::LedgerConflict { path } => {
                write!(
                    f,
                    "privacy ledger already exists at {} (budget already spent for this \
                     output directory; pass the override flag to replace it)",
                    path.display()
                )
            }
            PrivacyError::Io(e) => write!(f, "ledger i/o error: {e}"),
            PrivacyError::MalformedLedger { path, line, reason } => {
                write!(f, "malformed ledger {} line {line}: {reason}", path.display())
            }
        }
    }
}

impl std::error::Error for PrivacyError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PrivacyError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for PrivacyError {
    fn from(e: std::io::Error) -> Self {
        PrivacyError::Io(e)
    }
}

/// The (ε_tr, ε_dp, δ) budget for one run; the total ε is the sum of the two
/// components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub eps_tr: f64,
    pub eps_dp: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(eps_tr: f64, eps_dp: f64, delta: f64) -> Result<Self, PrivacyError> {
        if !(eps_tr.is_finite() && eps_tr >= 0.0) {
            return Err(PrivacyError::InvalidParameter { name: "eps_tr", value: eps_tr });
        }
        if !(eps_dp.is_finite() && eps_dp >= 0.0) {
            return Err(PrivacyError::InvalidParameter { name: "eps_dp", value: eps_dp });
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PrivacyError::InvalidParameter { name: "delta", value: delta });
        }
        Ok(Self { eps_tr, eps_dp, delta })
    }

    /// Total privacy budget ε = ε_tr + ε_dp.
    pub fn total_eps(&self) -> f64 {
        self.eps_tr + self.eps_dp
    }
}

/// Split a total budget into trace and gradient components:
/// ε_tr = fraction·ε, ε_dp the remainder, computed so the sum reconstructs
/// the total exactly. fraction = 1 is rejected — the gradient stage must keep
/// a positive budget — and fraction = 0 disables trace perturbation.
pub fn split_budget(
    total_eps: f64,
    fraction_tr: f64,
    delta: f64,
) -> Result<PrivacyBudget, PrivacyError> {
    if !(total_eps.is_finite() && total_eps > 0.0) {
        return Err(PrivacyError::InvalidParameter { name: "total_eps", value: total_eps });
    }
    if !(fraction_tr.is_finite() && (0.0..1.0).contains(&fraction_tr)) {
        return Err(PrivacyError::InvalidParameter { name: "fraction_tr", value: fraction_tr });
    }
    let eps_tr = fraction_tr * total_eps;
    // Remainder rather than (1 − f)·ε so eps_tr + eps_dp == total_eps exactly.
    let eps_dp = total_eps - eps_tr;
    PrivacyBudget::new(eps_tr, eps_dp, delta)
}

/// Calibrated noise multipliers with the inputs they were derived from.
/// `sigma_tr = 0` together with `trace_stage_private = false` means the trace
/// budget was zero and that stage runs unperturbed (and is flagged as such in
/// the ledger).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseScales {
    pub sigma_tr: f64,
    pub sigma_dp: f64,
    pub q: f64,
    pub t_steps: u64,
    pub m2: f64,
    pub trace_stage_private: bool,
}

/// Warning emitted when a budget exceeds the ε ≤ m₁·q²·T feasibility region
/// of the closed-form calibration rule. m₁ is an unspecified analysis
/// constant, so this is advisory only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityWarning {
    pub component: BudgetComponent,
    pub eps: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetComponent {
    Trace,
    Gradient,
}

impl fmt::Display for FeasibilityWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let which = match self.component {
            BudgetComponent::Trace => "eps_tr",
            BudgetComponent::Gradient => "eps_dp",
        };
        write!(
            f,
            "{which} = {} exceeds the calibration feasibility bound m1*q^2*T = {}; \
             the closed-form sigma may be outside its guaranteed regime",
            self.eps, self.bound
        )
    }
}

/// Calibrate noise multipliers from the budget: σ = √(m₂·T·q²·ln(1/δ))/ε per
/// component. A zero trace budget disables that stage (σ_tr = 0, flagged);
/// a zero gradient budget is an error. Feasibility violations against
/// ε ≤ m₁·q²·T are returned as warnings alongside the scales.
pub fn calibrate(
    budget: &PrivacyBudget,
    q: f64,
    t_steps: u64,
    m2: f64,
    m1: f64,
) -> Result<(NoiseScales, Vec<FeasibilityWarning>), PrivacyError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PrivacyError::InvalidParameter { name: "q", value: q });
    }
    if t_steps < 1 {
        return Err(PrivacyError::InvalidParameter { name: "t_steps", value: t_steps as f64 });
    }
    if !(m2.is_finite() && m2 > 0.0) {
        return Err(PrivacyError::InvalidParameter { name: "m2", value: m2 });
    }
    if !(m1.is_finite() && m1 > 0.0) {
        return Err(PrivacyError::InvalidParameter { name: "m1", value: m1 });
    }
    if budget.eps_dp == 0.0 {
        return Err(PrivacyError::ZeroGradientBudget);
    }
    let shared = m2 * t_steps as f64 * q * q * (1.0 / budget.delta).ln();
    let sigma_of = |eps: f64| shared.sqrt() / eps;
    let trace_stage_private = budget.eps_tr > 0.0;
    let scales = NoiseScales {
        sigma_tr: if trace_stage_private { sigma_of(budget.eps_tr) } else { 0.0 },
        sigma_dp: sigma_of(budget.eps_dp),
        q,
        t_steps,
        m2,
        trace_stage_private,
    };
    let bound = m1 * q * q * t_steps as f64;
    let mut warnings = Vec::new();
    if trace_stage_private && budget.eps_tr > bound {
        warnings.push(FeasibilityWarning {
            component: BudgetComponent::Trace,
            eps: budget.eps_tr,
            bound,
        });
    }
    if budget.eps_dp > bound {
        warnings.push(FeasibilityWarning {
            component: BudgetComponent::Gradient,
            eps: budget.eps_dp,
            bound,
        });
    }
    Ok((scales, warnings))
}

/// File name of the per-run spend ledger inside an output directory.
pub const LEDGER_FILE_NAME: &str = "privacy_ledger";

/// The persisted spend record for one run: everything needed to audit the
/// noise actually injected.
#[derive(Debug, Clone, PartialEq)]
pub struct SpendLedger {
    pub budget: PrivacyBudget,
    pub scales: NoiseScales,
    /// Present when the ledger replaced an earlier one via the override flag.
    pub override_note: Option<String>,
}

impl SpendLedger {
    pub fn new(budget: PrivacyBudget, scales: NoiseScales) -> Self {
        Self { budget, scales, override_note: None }
    }

    /// key = value serialization, one field per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("eps_tr", format!("{:?}", self.budget.eps_tr));
        push("eps_dp", format!("{:?}", self.budget.eps_dp));
        push("eps_total", format!("{:?}", self.budget.total_eps()));
        push("delta", format!("{:?}", self.budget.delta));
        push("q", format!("{:?}", self.scales.q));
        push("t_steps", self.scales.t_steps.to_string());
        push("sigma_tr", format!("{:?}", self.scales.sigma_tr));
        push("sigma_dp", format!("{:?}", self.scales.sigma_dp));
        push("m2", format!("{:?}", self.scales.m2));
        push("trace_stage_private", self.scales.trace_stage_private.to_string());
        if let Some(note) = &self.override_note {
            push("override_note", note.clone());
        }
        out
    }

    /// Parse the key = value format back; inverse of [`Self::to_text`].
    pub fn from_text(text: &str, path: &Path) -> Result<Self, PrivacyError> {
        let mut eps_tr = None;
        let mut eps_dp = None;
        let mut delta = None;
        let mut q = None;
        let mut t_steps = None;
        let mut sigma_tr = None;
        let mut sigma_dp = None;
        let mut m2 = None;
        let mut trace_stage_private = None;
        let mut override_note = None;
        let malformed = |line: usize, reason: &str| PrivacyError::MalformedLedger {
            path: path.to_path_buf(),
            line,
            reason: reason.to_string(),
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| malformed(line_no, "expected `key = value`"))?;
            let parse_f64 = |v: &str| {
                v.parse::<f64>().map_err(|_| malformed(line_no, "expected a number"))
            };
            match key {
                "eps_tr" => eps_tr = Some(parse_f64(value)?),
                "eps_dp" => eps_dp = Some(parse_f64(value)?),
                "eps_total" => {} // derived; ignored on read
                "delta" => delta = Some(parse_f64(value)?),
                "q" => q = Some(parse_f64(value)?),
                "t_steps" => {
                    t_steps = Some(
                        value
                            .parse::<u64>()
                            .map_err(|_| malformed(line_no, "expected an integer"))?,
                    )
                }
                "sigma_tr" => sigma_tr = Some(parse_f64(value)?),
                "sigma_dp" => sigma_dp = Some(parse_f64(value)?),
                "m2" => m2 = Some(parse_f64(value)?),
                "trace_stage_private" => {
                    trace_stage_private = Some(
                        value
                            .parse::<bool>()
                            .map_err(|_| malformed(line_no, "expected true/false"))?,
                    )
                }
                "override_note" => override_note = Some(value.to_string()),
                other => {
                    return Err(malformed(line_no, &format!("unknown key `{other}`")));
                }
            }
        }
        let require = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| malformed(0, &format!("missing key `{name}`")))
        };
        let budget = PrivacyBudget {
            eps_tr: require("eps_tr", eps_tr)?,
            eps_dp: require("eps_dp", eps_dp)?,
            delta: require("delta", delta)?,
        };
        let scales = NoiseScales {
            sigma_tr: require("sigma_tr", sigma_tr)?,
            sigma_dp: require("sigma_dp", sigma_dp)?,
            q: require("q", q)?,
            t_steps: t_steps.ok_or_else(|| malformed(0, "missing key `t_steps`"))?,
            m2: require("m2", m2)?,
            trace_stage_private: trace_stage_private
                .ok_or_else(|| malformed(0, "missing key `trace_stage_private`"))?,
        };
        Ok(Self { budget, scales, override_note })
    }
}

/// Write the spend ledger into `run_dir` under the fixed ledger file name.
/// Creation is exclusive: a run whose directory already carries a ledger has
/// already spent its budget and is refused unless `override_existing` is set,
/// in which case the replacement records an audit note.
pub fn write_spend_ledger(
    run_dir: &Path,
    ledger: &SpendLedger,
    override_existing: bool,
) -> Result<PathBuf, PrivacyError> {
    fs::create_dir_all(run_dir)?;
    let path = run_dir.join(LEDGER_FILE_NAME);
    let mut to_write = ledger.clone();
    let mut file = if override_existing {
        if path.exists() {
            to_write.override_note =
                Some("replaced an existing ledger via the override flag".to_string());
        }
        fs::File::create(&path)?
    } else {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(PrivacyError::LedgerConflict { path });
            }
            Err(e) => return Err(e.into()),
        }
    };
    file.write_all(to_write.to_text().as_bytes())?;
    Ok(path)
}

/// Read a ledger back from a run directory.
pub fn read_spend_ledger(run_dir: &Path) -> Result<SpendLedger, PrivacyError> {
    let path = run_dir.join(LEDGER_FILE_NAME);
    let text = fs::read_to_string(&path)?;
    SpendLedger::from_text(&text, &path)
}
