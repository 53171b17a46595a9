//! Alternating prune-then-fit baselines.
//!
//! * AltMin-lite: weighted magnitude pruning of `Ŵ − L`, then the exact
//!   `H′`-weighted rank-r fit of `Ŵ − S`. The prune step keeps projected
//!   residual values and does not refit them on the support.
//! * OATS: the same alternation on the surrogate `½‖diag(d)(Ŵ − S − L)‖²_F`
//!   with `d_i = ‖X_{:,i}‖₂`, so both sub-steps are exact minimizers of it.
//! * EoRA: one AltMin-lite step.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{rank_r_weighted_fit, DenseMatrix, HOperator, SvdMode};
use crate::solver::{build_hessian, objective, summarize, Decomposition, LayerProblem};
use crate::sparsity::project;
use crate::tensor_io::{Damping, IterRecord, RunReport};

/// Per-input-channel weights for the prune step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneWeighting {
    /// `diag(H′)^{1/2}`.
    HessianLite,
    /// `diag(XᵀX)^{1/2}`, floored like the OATS weights.
    DiagOnly,
}

impl FromStr for PruneWeighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hessian" | "hessian_lite" => Ok(PruneWeighting::HessianLite),
            "diag" | "diag_only" => Ok(PruneWeighting::DiagOnly),
            other => Err(format!("unknown prune weighting {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltMinConfig {
    pub steps: usize,
    pub prune_weighting: PruneWeighting,
    pub damping: Damping,
}

impl Default for AltMinConfig {
    fn default() -> Self {
        Self {
            steps: 80,
            prune_weighting: PruneWeighting::HessianLite,
            damping: Damping::default(),
        }
    }
}

/// Floor for zero Gram diagonals, relative to the largest entry.
const WEIGHT_FLOOR: f64 = 1e-12;

/// `sqrt(diag(XᵀX))`, with dead channels raised to `1e-12·max`.
pub fn channel_norms(gram: &DenseMatrix) -> Vec<f64> {
    let mut d: Vec<f64> = gram.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let floor = if max > 0.0 { WEIGHT_FLOOR * max } else { 1.0 };
    for v in &mut d {
        if *v < floor {
            *v = floor;
        }
    }
    d
}

fn column(values: Vec<f64>) -> DenseMatrix {
    let n = values.len();
    DenseMatrix::from_vec(n, 1, values).expect("length matches")
}

/// Diagnostic evaluated on each `(S, L)` iterate.
type Surrogate<'a> = &'a dyn Fn(&DenseMatrix, &DenseMatrix) -> f64;

fn alternate(
    method: &str,
    problem: &LayerProblem,
    hop: &HOperator,
    weights: &DenseMatrix,
    steps: usize,
    surrogate: Option<Surrogate>,
) -> Result<Decomposition> {
    let start = Instant::now();
    let (rows, cols) = problem.w_hat.shape();
    let mut s = DenseMatrix::zeros(rows, cols);
    let mut l = DenseMatrix::zeros(rows, cols);
    let mut records = Vec::with_capacity(steps);
    for step in 1..=steps {
        let (prev_s, prev_l) = (s.clone(), l.clone());
        s = project(&(&problem.w_hat - &l), problem.pattern, Some(weights))?.0;
        l = rank_r_weighted_fit(hop, &(&problem.w_hat - &s), problem.rank, SvdMode::Exact)?;
        let delta_s = (&s - &prev_s).frobenius_norm();
        let delta_l = (&l - &prev_l).frobenius_norm();
        records.push(IterRecord {
            surrogate: surrogate.map(|f| f(&s, &l)),
            delta_s: Some(delta_s),
            delta_l: Some(delta_l),
            delta_sum: Some((&(&s - &prev_s) + &(&l - &prev_l)).frobenius_norm()),
            wall_ms: Some(start.elapsed().as_secs_f64() * 1e3),
            ..IterRecord::objective_only(step, objective(problem, &s, &l))
        });
    }
    let mut summary = summarize(method, problem, &s, &l, records.len(), false)?;
    summary.surrogate_objective = records.last().and_then(|r| r.surrogate);
    Ok(Decomposition {
        sparse: s,
        low_rank: l,
        report: RunReport { records, summary },
    })
}

/// AltMin-lite: `cfg.steps` rounds of weighted magnitude pruning followed
/// by the closed-form `H′`-weighted low-rank fit.
pub fn alt_min(problem: &LayerProblem, cfg: &AltMinConfig) -> Result<Decomposition> {
    alt_min_labeled("altmin-lite", problem, cfg)
}

fn alt_min_labeled(
    method: &str,
    problem: &LayerProblem,
    cfg: &AltMinConfig,
) -> Result<Decomposition> {
    let hop = build_hessian(problem, cfg.damping)?;
    let weights = match cfg.prune_weighting {
        PruneWeighting::HessianLite => hop.matrix().diag().iter().map(|v| v.sqrt()).collect(),
        PruneWeighting::DiagOnly => channel_norms(&problem.gram),
    };
    let mut dec = alternate(
        method,
        problem,
        &hop,
        &column(weights),
        cfg.steps.max(1),
        None,
    )?;
    dec.report
        .summary
        .notes
        .push("prune step is weighted magnitude on the residual without support refit".into());
    Ok(dec)
}

/// OATS reduction: alternating minimization of `½‖diag(d)(Ŵ − S − L)‖²_F`.
/// Records carry the surrogate next to the layer objective.
pub fn oats(problem: &LayerProblem, steps: usize) -> Result<Decomposition> {
    let d = channel_norms(&problem.gram);
    let hop = HOperator::from_diagonal(&d.iter().map(|v| v * v).collect::<Vec<_>>())?;
    let surrogate = |s: &DenseMatrix, l: &DenseMatrix| {
        0.5 * (&(&problem.w_hat - s) - l)
            .scale_rows(&d)
            .frobenius_norm_sq()
    };
    let mut dec = alternate(
        "oats",
        problem,
        &hop,
        &column(d.clone()),
        steps.max(1),
        Some(&surrogate),
    )?;
    dec.report
        .summary
        .notes
        .push("outlier extraction is folded into the diagonal weighting".into());
    Ok(dec)
}

/// EoRA: one prune step and one closed-form low-rank correction.
pub fn eora(problem: &LayerProblem, damping: Damping) -> Result<Decomposition> {
    let cfg = AltMinConfig {
        steps: 1,
        damping,
        ..AltMinConfig::default()
    };
    alt_min_labeled("eora", problem, &cfg)
}
