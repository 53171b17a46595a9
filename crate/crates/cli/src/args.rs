use std::path::PathBuf;

use clap::Args;
use slr_core::baselines::PruneWeighting;
use slr_core::solver::RhoSchedule;
use slr_core::tensor_io::{SolverChoice, SvdPolicy};
use slr_core::tm::TmHyper;
use slr_core::{RunConfig, SparsityPattern};

use crate::error::CliError;

/// Decomposition settings. Each flag overrides the key of the same name
/// in `--config`.
#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Run configuration file (`key = value` lines, optional `[tm]` section).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `N:M` or `unstructured:<keep_fraction>`.
    #[arg(long)]
    pub sparsity: Option<SparsityPattern>,
    /// Rank budget of the low-rank part.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Ridge weight λ on `‖Ŵ − S − L‖²`.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Initial ADMM penalty.
    #[arg(long)]
    pub rho0: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Root seed; randomized SVD and TM batching draw from sub-streams of it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// 3basil | altmin | oats | eora
    #[arg(long)]
    pub method: Option<String>,
    /// Alternations for altmin / oats.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Pruning weights of altmin: `hessian` uses diag(H′)^½ (the damped
    /// Hessian), `diag` uses ‖X_j‖₂ = diag(XᵀX)^½ (Wanda's per-channel
    /// input norms).
    #[arg(long)]
    pub altmin_weighting: Option<PruneWeighting>,
    /// step | step:<period> | geometric:<factor> | constant
    #[arg(long)]
    pub rho_schedule: Option<RhoSchedule>,
    /// auto | exact | randomized
    #[arg(long)]
    pub svd: Option<SvdPolicy>,
    /// Rescale rows so the damped Hessian has a unit diagonal.
    #[arg(long)]
    pub precondition: Option<bool>,
    #[arg(long)]
    pub damping_diag: Option<f64>,
    #[arg(long)]
    pub damping_trace: Option<f64>,
    #[arg(long)]
    pub tol_abs: Option<f64>,
    #[arg(long)]
    pub tol_rel: Option<f64>,
}

impl SolveArgs {
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let sparsity = self.sparsity.ok_or_else(|| {
                    CliError::Usage("--sparsity is required without --config".into())
                })?;
                let rank = self
                    .rank
                    .ok_or_else(|| CliError::Usage("--rank is required without --config".into()))?;
                RunConfig::new(sparsity, rank)
            }
        };
        if let Some(v) = self.sparsity {
            cfg.sparsity = v;
        }
        if let Some(v) = self.rank {
            cfg.rank = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.rho0 {
            cfg.rho0 = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.altmin_weighting {
            cfg.altmin_weighting = v;
        }
        if let Some(v) = self.rho_schedule {
            cfg.rho_schedule = v;
        }
        if let Some(v) = self.svd {
            cfg.svd = v;
        }
        if let Some(v) = self.precondition {
            cfg.precondition = v;
        }
        if let Some(v) = self.damping_diag {
            cfg.damping.diag_coeff = v;
        }
        if let Some(v) = self.damping_trace {
            cfg.damping.trace_coeff = v;
        }
        if let Some(v) = self.tol_abs {
            cfg.tol_abs = v;
        }
        if let Some(v) = self.tol_rel {
            cfg.tol_rel = v;
        }
        if self.method.is_some() || self.steps.is_some() {
            cfg.solver = solver_choice(self.method.as_deref(), self.steps, cfg.solver)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn solver_choice(
    method: Option<&str>,
    steps: Option<usize>,
    current: SolverChoice,
) -> Result<SolverChoice, CliError> {
    let current_steps = match current {
        SolverChoice::AltMin { steps } | SolverChoice::Oats { steps } => steps,
        _ => slr_core::tensor_io::DEFAULT_ALT_STEPS,
    };
    let steps = steps.unwrap_or(current_steps);
    let name = method.unwrap_or(current.label());
    Ok(match name {
        "3basil" => SolverChoice::ThreeBasil,
        "altmin" | "altmin-lite" => SolverChoice::AltMin { steps },
        "oats" => SolverChoice::Oats { steps },
        "eora" => SolverChoice::Eora,
        other => return Err(CliError::Usage(format!("unknown method {other:?}"))),
    })
}

/// Refinement settings; each flag overrides the `[tm]` key of the same name.
#[derive(Debug, Clone, Args)]
pub struct TmArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eta_min: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Also train the RMSNorm scales.
    #[arg(long)]
    pub train_norms: Option<bool>,
}

impl TmArgs {
    pub fn any(&self) -> bool {
        self.epochs.is_some()
            || self.batch.is_some()
            || self.lr.is_some()
            || self.eta_min.is_some()
            || self.beta1.is_some()
            || self.beta2.is_some()
            || self.eps.is_some()
            || self.train_norms.is_some()
    }

    pub fn apply(&self, base: Option<TmHyper>) -> Result<TmHyper, CliError> {
        let mut h = base.unwrap_or_default();
        if let Some(v) = self.epochs {
            h.epochs = v;
        }
        if let Some(v) = self.batch {
            h.batch = v;
        }
        if let Some(v) = self.lr {
            h.lr = v;
        }
        if let Some(v) = self.eta_min {
            h.eta_min = v;
        }
        if let Some(v) = self.beta1 {
            h.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            h.beta2 = v;
        }
        if let Some(v) = self.eps {
            h.eps = v;
        }
        if let Some(v) = self.train_norms {
            h.train_norms = v;
        }
        h.validate()?;
        Ok(h)
    }
}
