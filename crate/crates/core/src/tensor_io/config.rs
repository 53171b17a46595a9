//! Run configuration in flat `key = value` text.
//!
//! ```text
//! # comments run to end of line
//! sparsity = 2:4            # or unstructured:0.5 (keep fraction)
//! rank = 4
//! lambda = 0.0
//! rho0 = 0.1
//! max_iters = 200
//! seed = 0
//! solver = 3basil           # 3basil | altmin | oats | eora
//! steps = 80                # altmin / oats alternations
//! altmin_weighting = hessian  # hessian | diag
//! rho_schedule = step       # step | step:<period> | geometric:<factor> | constant
//! svd = auto                # auto | exact | randomized
//! precondition = true       # scale rows so H′ has a unit diagonal
//! damping_diag = 0.005
//! damping_trace = 0.005
//! tol_abs = 1e-7
//! tol_rel = 1e-6
//!
//! [tm]
//! epochs = 20
//! batch = 8
//! lr = 2e-5
//! eta_min = 4e-6
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! train_norms = false
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::PruneWeighting;
use crate::error::{Error, Result};
use crate::solver::RhoSchedule;
use crate::sparsity::SparsityPattern;
use crate::tm::TmHyper;

/// Extra diagonal loading of `H` proportional to `diag(XᵀX)` and `tr(XᵀX)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Damping {
    pub diag_coeff: f64,
    pub trace_coeff: f64,
}

impl Default for Damping {
    fn default() -> Self {
        Self {
            diag_coeff: 0.005,
            trace_coeff: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdPolicy {
    /// Exact below 256 rows/cols, randomized above.
    Auto,
    Exact,
    Randomized,
}

impl FromStr for SvdPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(SvdPolicy::Auto),
            "exact" => Ok(SvdPolicy::Exact),
            "randomized" => Ok(SvdPolicy::Randomized),
            other => Err(format!("unknown svd policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverChoice {
    ThreeBasil,
    AltMin { steps: usize },
    Oats { steps: usize },
    Eora,
}

impl SolverChoice {
    pub fn label(&self) -> &'static str {
        match self {
            SolverChoice::ThreeBasil => "3basil",
            SolverChoice::AltMin { .. } => "altmin-lite",
            SolverChoice::Oats { .. } => "oats",
            SolverChoice::Eora => "eora",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sparsity: SparsityPattern,
    pub rank: usize,
    pub lambda: f64,
    pub rho0: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub damping: Damping,
    pub solver: SolverChoice,
    pub altmin_weighting: PruneWeighting,
    pub rho_schedule: RhoSchedule,
    pub svd: SvdPolicy,
    /// Run ADMM on rows rescaled to give `H′` a unit diagonal.
    pub precondition: bool,
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub tm: Option<TmHyper>,
}

pub const DEFAULT_ALT_STEPS: usize = 80;

impl RunConfig {
    /// Defaults for everything except the constraint set.
    pub fn new(sparsity: SparsityPattern, rank: usize) -> Self {
        Self {
            sparsity,
            rank,
            lambda: 0.0,
            rho0: 0.1,
            max_iters: 200,
            seed: 0,
            damping: Damping::default(),
            solver: SolverChoice::ThreeBasil,
            altmin_weighting: PruneWeighting::HessianLite,
            rho_schedule: RhoSchedule::default(),
            svd: SvdPolicy::Auto,
            precondition: true,
            tol_abs: 1e-7,
            tol_rel: 1e-6,
            tm: None,
        }
    }

    /// Shape-independent invariants.
    pub fn validate(&self) -> Result<()> {
        self.sparsity.validate()?;
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig {
                    field,
                    message: format!("{v} must be positive"),
                })
            }
        };
        let nonneg = |field: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig {
                    field,
                    message: format!("{v} must be non-negative"),
                })
            }
        };
        nonneg("lambda", self.lambda)?;
        positive("rho0", self.rho0)?;
        nonneg("damping_diag", self.damping.diag_coeff)?;
        nonneg("damping_trace", self.damping.trace_coeff)?;
        nonneg("tol_abs", self.tol_abs)?;
        nonneg("tol_rel", self.tol_rel)?;
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig {
                field: "max_iters",
                message: "must be at least 1".into(),
            });
        }
        match self.solver {
            SolverChoice::AltMin { steps } | SolverChoice::Oats { steps } if steps == 0 => {
                return Err(Error::InvalidConfig {
                    field: "steps",
                    message: "must be at least 1".into(),
                });
            }
            _ => {}
        }
        match self.rho_schedule {
            RhoSchedule::StepFunction { period: 0 } => {
                return Err(Error::InvalidConfig {
                    field: "rho_schedule",
                    message: "step period must be at least 1".into(),
                })
            }
            RhoSchedule::Geometric { factor } if !(factor >= 1.0) => {
                return Err(Error::InvalidConfig {
                    field: "rho_schedule",
                    message: format!("geometric factor {factor} must be >= 1"),
                })
            }
            _ => {}
        }
        if let Some(tm) = &self.tm {
            tm.validate()?;
        }
        Ok(())
    }

    /// Invariants that need the weight shape (`n_in × n_out`).
    pub fn validate_for_shape(&self, rows: usize, cols: usize) -> Result<()> {
        self.validate()?;
        if self.rank > rows.min(cols) {
            return Err(Error::InvalidConfig {
                field: "rank",
                message: format!("rank {} exceeds min({rows}, {cols})", self.rank),
            });
        }
        if let SparsityPattern::SemiStructured { m, .. } = self.sparsity {
            if !cols.is_multiple_of(m) {
                return Err(Error::InvalidConfig {
                    field: "sparsity",
                    message: format!("M = {m} does not divide the row length {cols}"),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sparsity = None;
        let mut rank = None;
        let mut cfg = RunConfig::new(SparsityPattern::nm(2, 4), 0);
        let mut steps = DEFAULT_ALT_STEPS;
        let mut solver_name = String::from("3basil");
        let mut tm: Option<TmHyper> = None;
        let mut in_tm = false;
        let mut seen = HashSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if line == "[tm]" {
                    in_tm = true;
                    tm.get_or_insert_with(TmHyper::default);
                    continue;
                }
                return Err(parse_err(line_no, format!("unknown section {line}")));
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                parse_err(line_no, format!("expected `key = value`, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            let qualified = if in_tm {
                format!("tm.{key}")
            } else {
                key.to_string()
            };
            if !seen.insert(qualified.clone()) {
                return Err(parse_err(line_no, format!("duplicate key `{qualified}`")));
            }

            if in_tm {
                let hyper = tm.as_mut().expect("section opened");
                match key {
                    "epochs" => hyper.epochs = num(line_no, key, value)?,
                    "batch" => hyper.batch = num(line_no, key, value)?,
                    "lr" => hyper.lr = num(line_no, key, value)?,
                    "eta_min" => hyper.eta_min = num(line_no, key, value)?,
                    "beta1" => hyper.beta1 = num(line_no, key, value)?,
                    "beta2" => hyper.beta2 = num(line_no, key, value)?,
                    "eps" => hyper.eps = num(line_no, key, value)?,
                    "train_norms" => hyper.train_norms = num(line_no, key, value)?,
                    _ => return Err(parse_err(line_no, format!("unknown key `tm.{key}`"))),
                }
                continue;
            }
            match key {
                "sparsity" => {
                    sparsity = Some(
                        value
                            .parse::<SparsityPattern>()
                            .map_err(|m| parse_err(line_no, m))?,
                    )
                }
                "rank" => rank = Some(num(line_no, key, value)?),
                "lambda" => cfg.lambda = num(line_no, key, value)?,
                "rho0" => cfg.rho0 = num(line_no, key, value)?,
                "max_iters" => cfg.max_iters = num(line_no, key, value)?,
                "seed" => cfg.seed = num(line_no, key, value)?,
                "solver" => solver_name = value.to_string(),
                "steps" => steps = num(line_no, key, value)?,
                "altmin_weighting" => {
                    cfg.altmin_weighting = value.parse().map_err(|m| parse_err(line_no, m))?
                }
                "rho_schedule" => {
                    cfg.rho_schedule = parse_schedule(value).map_err(|m| parse_err(line_no, m))?
                }
                "svd" => cfg.svd = value.parse().map_err(|m| parse_err(line_no, m))?,
                "precondition" => cfg.precondition = num(line_no, key, value)?,
                "damping_diag" => cfg.damping.diag_coeff = num(line_no, key, value)?,
                "damping_trace" => cfg.damping.trace_coeff = num(line_no, key, value)?,
                "tol_abs" => cfg.tol_abs = num(line_no, key, value)?,
                "tol_rel" => cfg.tol_rel = num(line_no, key, value)?,
                _ => return Err(parse_err(line_no, format!("unknown key `{key}`"))),
            }
        }

        cfg.sparsity = sparsity.ok_or(Error::InvalidConfig {
            field: "sparsity",
            message: "missing required key".into(),
        })?;
        cfg.rank = rank.ok_or(Error::InvalidConfig {
            field: "rank",
            message: "missing required key".into(),
        })?;
        cfg.solver = match solver_name.as_str() {
            "3basil" => SolverChoice::ThreeBasil,
            "altmin" | "altmin-lite" => SolverChoice::AltMin { steps },
            "oats" => SolverChoice::Oats { steps },
            "eora" => SolverChoice::Eora,
            other => {
                return Err(Error::InvalidConfig {
                    field: "solver",
                    message: format!("unknown solver {other:?}"),
                })
            }
        };
        cfg.tm = tm;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the configuration in the same text format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let steps = match self.solver {
            SolverChoice::AltMin { steps } | SolverChoice::Oats { steps } => steps,
            _ => DEFAULT_ALT_STEPS,
        };
        let solver = match self.solver {
            SolverChoice::ThreeBasil => "3basil",
            SolverChoice::AltMin { .. } => "altmin",
            SolverChoice::Oats { .. } => "oats",
            SolverChoice::Eora => "eora",
        };
        let schedule = match self.rho_schedule {
            RhoSchedule::StepFunction { period } => format!("step:{period}"),
            RhoSchedule::Geometric { factor } => format!("geometric:{factor}"),
            RhoSchedule::Constant => "constant".into(),
        };
        let svd = match self.svd {
            SvdPolicy::Auto => "auto",
            SvdPolicy::Exact => "exact",
            SvdPolicy::Randomized => "randomized",
        };
        let weighting = match self.altmin_weighting {
            PruneWeighting::HessianLite => "hessian",
            PruneWeighting::DiagOnly => "diag",
        };
        out.push_str(&format!("sparsity = {}\n", self.sparsity));
        out.push_str(&format!("rank = {}\n", self.rank));
        out.push_str(&format!("lambda = {:e}\n", self.lambda));
        out.push_str(&format!("rho0 = {:e}\n", self.rho0));
        out.push_str(&format!("max_iters = {}\n", self.max_iters));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("solver = {solver}\n"));
        out.push_str(&format!("steps = {steps}\n"));
        out.push_str(&format!("altmin_weighting = {weighting}\n"));
        out.push_str(&format!("rho_schedule = {schedule}\n"));
        out.push_str(&format!("svd = {svd}\n"));
        out.push_str(&format!("precondition = {}\n", self.precondition));
        out.push_str(&format!("damping_diag = {:e}\n", self.damping.diag_coeff));
        out.push_str(&format!("damping_trace = {:e}\n", self.damping.trace_coeff));
        out.push_str(&format!("tol_abs = {:e}\n", self.tol_abs));
        out.push_str(&format!("tol_rel = {:e}\n", self.tol_rel));
        if let Some(tm) = &self.tm {
            out.push_str("\n[tm]\n");
            out.push_str(&format!("epochs = {}\n", tm.epochs));
            out.push_str(&format!("batch = {}\n", tm.batch));
            out.push_str(&format!("lr = {:e}\n", tm.lr));
            out.push_str(&format!("eta_min = {:e}\n", tm.eta_min));
            out.push_str(&format!("beta1 = {}\n", tm.beta1));
            out.push_str(&format!("beta2 = {}\n", tm.beta2));
            out.push_str(&format!("eps = {:e}\n", tm.eps));
            out.push_str(&format!("train_norms = {}\n", tm.train_norms));
        }
        out
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| parse_err(line, format!("bad value {value:?} for `{key}`: {e}")))
}

impl FromStr for RhoSchedule {
    type Err = String;

    /// Accepts `step`, `step:<period>`, `geometric:<factor>` or `constant`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_schedule(s.trim())
    }
}

fn parse_schedule(value: &str) -> std::result::Result<RhoSchedule, String> {
    match value.split_once(':') {
        None if value == "step" => Ok(RhoSchedule::default()),
        None if value == "constant" => Ok(RhoSchedule::Constant),
        Some(("step", p)) => p
            .parse()
            .map(|period| RhoSchedule::StepFunction { period })
            .map_err(|e| format!("bad step period {p:?}: {e}")),
        Some(("geometric", f)) => f
            .parse()
            .map(|factor| RhoSchedule::Geometric { factor })
            .map_err(|e| format!("bad geometric factor {f:?}: {e}")),
        _ => Err(format!("unknown rho schedule {value:?}")),
    }
}
