//! Layer-wise sparse plus low-rank decomposition by 3-block ADMM.
//!
//! Minimizes `½‖X(Ŵ − S − L)‖²_F + (λ/2)‖Ŵ − S − L‖²_F` subject to `S`
//! matching a sparsity pattern and `rank(L) ≤ r`. A copy `D` of `S` carries
//! the sparsity constraint and `V` is the dual of `S = D`. Each iteration
//! runs, in order,
//!
//! ```text
//! S ← (H′ + ρI)⁻¹ (H′(Ŵ − L) − V + ρD)
//! L ← H′^{-1/2} P_r(H′^{1/2}(Ŵ − S))
//! D ← P_S(S + V/ρ)
//! V ← V + ρ(S − D)
//! ```
//!
//! where `H′ = XᵀX + λI + c_d·diag(XᵀX) + c_t·tr(XᵀX)·I`. Only the Gram
//! matrix `XᵀX` is needed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{alt_min, eora, oats, AltMinConfig};
use crate::error::{Error, Result};
use crate::linalg::{
    numerical_rank, rank_r_weighted_fit, shifted_inverse_apply, DenseMatrix, HOperator, SvdMode,
};
use crate::sparsity::{project, support_symmetric_difference, SparsityPattern, Support};
use crate::tensor_io::{
    Damping, IterRecord, RunConfig, RunReport, RunSummary, SolverChoice, SvdPolicy,
};

/// Upper limit on ρ; past this the S-update is numerically `D` already and
/// `H′ + ρI` only loses conditioning.
pub const RHO_CAP: f64 = 1e8;

/// Singular values below this fraction of the largest are ignored when
/// reporting the rank of `L`.
pub const RANK_TOL: f64 = 1e-8;

/// Matrices at or above this size use the randomized SVD in the L-update
/// under [`SvdPolicy::Auto`].
pub const RANDOMIZED_SVD_MIN_DIM: usize = 256;

/// One layer's decomposition problem.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    /// Pre-trained weights, `n_in × n_out`.
    pub w_hat: DenseMatrix,
    /// `XᵀX`, `n_in × n_in`.
    pub gram: DenseMatrix,
    pub lambda: f64,
    pub pattern: SparsityPattern,
    pub rank: usize,
}

impl LayerProblem {
    pub fn new(
        w_hat: DenseMatrix,
        gram: DenseMatrix,
        lambda: f64,
        pattern: SparsityPattern,
        rank: usize,
    ) -> Result<Self> {
        let (n_in, n_out) = w_hat.shape();
        if gram.shape() != (n_in, n_in) {
            return Err(Error::ShapeMismatch {
                op: "LayerProblem gram",
                lhs: (n_in, n_in),
                rhs: gram.shape(),
            });
        }
        if !w_hat.is_finite() || !gram.is_finite() {
            return Err(Error::NonFinite("layer problem inputs".into()));
        }
        let asym = gram.asymmetry();
        if asym > 1e-10 * gram.max_abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric(asym));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig {
                field: "lambda",
                message: format!("{lambda} is negative"),
            });
        }
        if rank > n_in.min(n_out) {
            return Err(Error::InvalidConfig {
                field: "rank",
                message: format!("rank {rank} exceeds min({n_in}, {n_out})"),
            });
        }
        pattern.validate_for(n_in, n_out)?;
        Ok(Self {
            w_hat,
            gram,
            lambda,
            pattern,
            rank,
        })
    }

    /// Builds the problem from raw activations `X` (`tokens × n_in`).
    pub fn from_activations(
        w_hat: DenseMatrix,
        x: &DenseMatrix,
        lambda: f64,
        pattern: SparsityPattern,
        rank: usize,
    ) -> Result<Self> {
        let gram = x.t_matmul(x)?;
        Self::new(w_hat, gram, lambda, pattern, rank)
    }

    pub fn keep_count(&self) -> usize {
        let (r, c) = self.w_hat.shape();
        self.pattern.keep_count(r, c)
    }
}

/// Mean Gram matrix `(1/N) Σ XᵀX` over a stack of activation blocks with
/// `N` total rows.
pub fn mean_gram(blocks: &[DenseMatrix]) -> Result<DenseMatrix> {
    let n = blocks.first().map_or(0, |b| b.cols());
    let mut gram = DenseMatrix::zeros(n, n);
    let mut count = 0usize;
    for b in blocks {
        gram.axpy(1.0, &b.t_matmul(b)?)?;
        count += b.rows();
    }
    if count > 0 {
        gram = gram.scale(1.0 / count as f64);
    }
    Ok(gram)
}

/// `H′ = XᵀX + λI + c_d·diag(XᵀX) + c_t·tr(XᵀX)·I`.
pub fn damped_hessian(problem: &LayerProblem, damping: Damping) -> DenseMatrix {
    let g = &problem.gram;
    let n = g.rows();
    let trace_term = damping.trace_coeff * g.trace();
    let mut h = g.clone();
    for i in 0..n {
        h[(i, i)] += problem.lambda + damping.diag_coeff * g[(i, i)] + trace_term;
    }
    h
}

/// Assembles `H′` and caches its eigendecomposition and square-root factors.
pub fn build_hessian(problem: &LayerProblem, damping: Damping) -> Result<HOperator> {
    HOperator::new(&damped_hessian(problem, damping))
}

/// `½·tr(EᵀGE) + (λ/2)‖E‖²_F` with `E = Ŵ − S − L`.
pub fn objective(problem: &LayerProblem, s: &DenseMatrix, l: &DenseMatrix) -> f64 {
    let e = &(&problem.w_hat - s) - l;
    let ge = problem.gram.matmul(&e).expect("shapes validated");
    let quad: f64 = e
        .as_slice()
        .iter()
        .zip(ge.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    0.5 * quad + 0.5 * problem.lambda * e.frobenius_norm_sq()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoSchedule {
    /// Every `period` iterations, grow ρ by 1.1, 1.05 or 1.02 depending on
    /// how many support positions of `D` changed over the period.
    StepFunction {
        period: usize,
    },
    /// `ρ ← γρ` after every iteration; `Σ 1/ρ_t` is finite for `γ > 1`.
    Geometric {
        factor: f64,
    },
    Constant,
}

impl Default for RhoSchedule {
    fn default() -> Self {
        RhoSchedule::StepFunction { period: 10 }
    }
}

/// Step-function multiplier for `s_t` support changes out of `k` retained
/// entries.
pub fn step_multiplier(support_change: usize, k: usize) -> f64 {
    let s = support_change as f64;
    let k = k as f64;
    if s >= 0.1 * k {
        1.1
    } else if s >= 0.005 * k {
        1.05
    } else if s >= 0.5 {
        1.02
    } else {
        1.0
    }
}

/// ADMM iterate plus the cached weighting.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub s: DenseMatrix,
    pub l: DenseMatrix,
    pub d: DenseMatrix,
    pub v: DenseMatrix,
    pub rho: f64,
    pub iter: usize,
    pub hop: HOperator,
    /// Support of the current `D`.
    pub support: Support,
    /// Support of `D` when ρ was last scheduled.
    pub last_schedule_support: Support,
    pub svd_policy: SvdPolicy,
    pub seed: u64,
}

impl AdmmState {
    /// Warm start: `S = D = P_S(Ŵ)`, `L` the weighted rank-r fit of the
    /// remainder, `V = 0`.
    pub fn init(
        problem: &LayerProblem,
        hop: HOperator,
        rho0: f64,
        svd_policy: SvdPolicy,
        seed: u64,
    ) -> Result<Self> {
        if !(rho0 > 0.0) {
            return Err(Error::InvalidConfig {
                field: "rho0",
                message: format!("{rho0} is not positive"),
            });
        }
        let (d, support) = project(&problem.w_hat, problem.pattern, None)?;
        let mode = svd_mode(svd_policy, problem.w_hat.shape(), seed, 0);
        let l = rank_r_weighted_fit(&hop, &(&problem.w_hat - &d), problem.rank, mode)?;
        let (rows, cols) = problem.w_hat.shape();
        Ok(Self {
            s: d.clone(),
            l,
            d,
            v: DenseMatrix::zeros(rows, cols),
            rho: rho0,
            iter: 0,
            hop,
            last_schedule_support: support.clone(),
            support,
            svd_policy,
            seed,
        })
    }

    pub fn svd_mode(&self) -> SvdMode {
        svd_mode(self.svd_policy, self.s.shape(), self.seed, self.iter as u64)
    }
}

/// SVD route for the L-update. Randomized sketches are re-drawn every
/// iteration from `seed ^ iter`.
pub fn svd_mode(policy: SvdPolicy, shape: (usize, usize), seed: u64, iter: u64) -> SvdMode {
    let randomized = match policy {
        SvdPolicy::Exact => false,
        SvdPolicy::Randomized => true,
        SvdPolicy::Auto => shape.0.max(shape.1) >= RANDOMIZED_SVD_MIN_DIM,
    };
    if randomized {
        SvdMode::randomized(seed ^ iter)
    } else {
        SvdMode::Exact
    }
}

/// One S → L → D → V sweep at the state's current ρ.
pub fn admm_step(state: &AdmmState, problem: &LayerProblem) -> Result<AdmmState> {
    let rho = state.rho;
    let hop = &state.hop;

    let mut rhs = hop.apply(&(&problem.w_hat - &state.l))?;
    rhs.axpy(-1.0, &state.v)?;
    rhs.axpy(rho, &state.d)?;
    let s = shifted_inverse_apply(hop, rho, &rhs)?;

    let l = rank_r_weighted_fit(hop, &(&problem.w_hat - &s), problem.rank, state.svd_mode())?;

    let mut shifted = s.clone();
    shifted.axpy(1.0 / rho, &state.v)?;
    let (d, support) = project(&shifted, problem.pattern, None)?;

    let mut v = state.v.clone();
    v.axpy(rho, &(&s - &d))?;

    Ok(AdmmState {
        s,
        l,
        d,
        v,
        rho,
        iter: state.iter + 1,
        hop: state.hop.clone(),
        support,
        last_schedule_support: state.last_schedule_support.clone(),
        svd_policy: state.svd_policy,
        seed: state.seed,
    })
}

/// ρ for the next iteration. For the step function this must be called
/// only when `state.iter` is a multiple of the period; the support change
/// is measured against `state.last_schedule_support`.
pub fn update_rho(schedule: &RhoSchedule, state: &AdmmState, k: usize) -> f64 {
    let next = match *schedule {
        RhoSchedule::StepFunction { .. } => {
            let change = support_symmetric_difference(&state.support, &state.last_schedule_support)
                .expect("supports share the iterate shape");
            state.rho * step_multiplier(change, k)
        }
        RhoSchedule::Geometric { factor } => state.rho * factor,
        RhoSchedule::Constant => state.rho,
    };
    next.min(RHO_CAP).max(state.rho)
}

/// Output of a decomposition method.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub sparse: DenseMatrix,
    pub low_rank: DenseMatrix,
    pub report: RunReport,
}

impl Decomposition {
    pub fn objective(&self) -> f64 {
        self.report.summary.objective
    }
}

pub(crate) fn summarize(
    method: &str,
    problem: &LayerProblem,
    sparse: &DenseMatrix,
    low_rank: &DenseMatrix,
    iterations: usize,
    converged: bool,
) -> Result<RunSummary> {
    let (rows, cols) = sparse.shape();
    let support = Support::of_nonzeros(sparse);
    Ok(RunSummary {
        method: method.to_string(),
        objective: objective(problem, sparse, low_rank),
        surrogate_objective: None,
        rank: numerical_rank(low_rank, RANK_TOL)?,
        density: support.popcount() as f64 / (rows * cols) as f64,
        pattern: problem.pattern.to_string(),
        pattern_valid: problem.pattern.admits(&support),
        iterations,
        converged,
        workers: None,
        notes: Vec::new(),
    })
}

/// The problem the ADMM iterates actually run on, and the row scaling that
/// maps original variables into it.
///
/// With `precondition` set, rows are scaled by `s_i = √H′_ii` so the working
/// weighting `diag(s)⁻¹ H′ diag(s)⁻¹` has unit diagonal and `ρ` is measured
/// on that scale. The objective is unchanged under this change of
/// variables, as is the rank of `L` and the N:M support (groups run along
/// rows, which share one scale). Unstructured supports become
/// `√H′_ii`-weighted. The working problem carries `H′` itself as its Gram
/// matrix with no further damping.
pub fn preconditioned(
    problem: &LayerProblem,
    config: &RunConfig,
) -> Result<(LayerProblem, Vec<f64>)> {
    let h = damped_hessian(problem, config.damping);
    let n = h.rows();
    let scale: Vec<f64> = if config.precondition {
        let diag = h.diag();
        let smallest = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(smallest > 0.0) {
            return Err(Error::NotPositiveDefinite(smallest));
        }
        diag.iter().map(|v| v.sqrt()).collect()
    } else {
        vec![1.0; n]
    };
    let inv: Vec<f64> = scale.iter().map(|v| 1.0 / v).collect();
    let mut gram = h.scale_rows(&inv).scale_cols(&inv);
    // exact symmetry for the eigen-solver
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = m;
            gram[(j, i)] = m;
        }
    }
    let work = LayerProblem {
        w_hat: problem.w_hat.scale_rows(&scale),
        gram,
        lambda: 0.0,
        pattern: problem.pattern,
        rank: problem.rank,
    };
    Ok((work, scale))
}

/// Runs 3-block ADMM to `config.max_iters` iterations or until
/// `‖S − D‖_F ≤ tol_abs + tol_rel·‖Ŵ‖_F`.
///
/// The returned pair is feasible: the sparse part is the last `D` and the
/// low-rank part is refit against it. If the warm start or an earlier
/// feasible iterate `(D, L)` scores better on the objective, that one is
/// returned instead.
pub fn solve_3basil(problem: &LayerProblem, config: &RunConfig) -> Result<Decomposition> {
    let start = Instant::now();
    let (work, scale) = preconditioned(problem, config)?;
    let inv_scale: Vec<f64> = scale.iter().map(|v| 1.0 / v).collect();
    let unscale = |m: &DenseMatrix| m.scale_rows(&inv_scale);
    let hop = HOperator::new(&work.gram)?;
    let mut state = AdmmState::init(&work, hop, config.rho0, config.svd, config.seed)?;
    let k = problem.keep_count();
    let tol = config.tol_abs + config.tol_rel * work.w_hat.frobenius_norm();

    let initial = objective(problem, &unscale(&state.d), &unscale(&state.l));
    let mut best = (initial, state.d.clone(), state.l.clone());
    let mut records = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    let mut used_randomized = matches!(state.svd_mode(), SvdMode::Randomized { .. });

    for _ in 0..config.max_iters {
        let prev_s = state.s.clone();
        let prev_l = state.l.clone();
        let next = admm_step(&state, &work)?;
        used_randomized |= matches!(state.svd_mode(), SvdMode::Randomized { .. });
        state = next;

        let obj = objective(problem, &unscale(&state.d), &unscale(&state.l));
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at ADMM iteration {}",
                state.iter
            )));
        }
        let residual = (&state.s - &state.d).frobenius_norm();
        let step_s = unscale(&(&state.s - &prev_s));
        let step_l = unscale(&(&state.l - &prev_l));
        let delta_s = step_s.frobenius_norm();
        let delta_l = step_l.frobenius_norm();
        let delta_sum = (&step_s + &step_l).frobenius_norm();
        let rho_used = state.rho;

        let mut support_change = None;
        let next_rho = match config.rho_schedule {
            RhoSchedule::StepFunction { period } if state.iter % period.max(1) == 0 => {
                support_change = Some(support_symmetric_difference(
                    &state.support,
                    &state.last_schedule_support,
                )?);
                let rho = update_rho(&config.rho_schedule, &state, k);
                state.last_schedule_support = state.support.clone();
                rho
            }
            RhoSchedule::StepFunction { .. } => state.rho,
            _ => update_rho(&config.rho_schedule, &state, k),
        };

        records.push(IterRecord {
            iter: state.iter,
            objective: obj,
            surrogate: None,
            primal_residual: Some(residual),
            rho: Some(rho_used),
            support_change,
            delta_s: Some(delta_s),
            delta_l: Some(delta_l),
            delta_sum: Some(delta_sum),
            wall_ms: Some(start.elapsed().as_secs_f64() * 1e3),
        });
        if obj < best.0 {
            best = (obj, state.d.clone(), state.l.clone());
        }
        state.rho = next_rho;
        if residual <= tol {
            converged = true;
            break;
        }
    }

    let final_mode = svd_mode(
        config.svd,
        problem.w_hat.shape(),
        config.seed,
        state.iter as u64,
    );
    let refit = rank_r_weighted_fit(&state.hop, &(&work.w_hat - &state.d), work.rank, final_mode)?;
    let final_obj = objective(problem, &unscale(&state.d), &unscale(&refit));
    let (sparse, low_rank, from_final) = if final_obj <= best.0 {
        (unscale(&state.d), unscale(&refit), true)
    } else {
        (unscale(&best.1), unscale(&best.2), false)
    };

    let mut summary = summarize(
        "3basil",
        problem,
        &sparse,
        &low_rank,
        records.len(),
        converged,
    )?;
    if used_randomized {
        summary
            .notes
            .push("randomized SVD sketch re-drawn every iteration with seed ^ iter".into());
    }
    if !from_final {
        summary
            .notes
            .push("returned an earlier feasible iterate with lower objective".into());
    }
    Ok(Decomposition {
        sparse,
        low_rank,
        report: RunReport { records, summary },
    })
}

/// Runs the method selected by `config.solver`.
pub fn decompose(problem: &LayerProblem, config: &RunConfig) -> Result<Decomposition> {
    match config.solver {
        SolverChoice::ThreeBasil => solve_3basil(problem, config),
        SolverChoice::AltMin { steps } => alt_min(
            problem,
            &AltMinConfig {
                steps,
                prune_weighting: config.altmin_weighting,
                damping: config.damping,
            },
        ),
        SolverChoice::Oats { steps } => oats(problem, steps),
        SolverChoice::Eora => eora(problem, config.damping),
    }
}
