//! Truncated SVD: exact (through the Gram eigendecomposition) and randomized.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{sym_eig, DenseMatrix};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_OVERSAMPLE: usize = 10;
pub const DEFAULT_POWER_ITERS: usize = 2;

/// Thin SVD factors `A ≈ U · diag(sigma) · Vᵀ`, singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.u
            .scale_cols(&self.sigma)
            .matmul_t(&self.v)
            .expect("consistent factors")
    }
}

/// How the rank-r projection computes its singular subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SvdMode {
    Exact,
    Randomized {
        oversample: usize,
        power_iters: usize,
        seed: u64,
    },
}

impl SvdMode {
    pub fn randomized(seed: u64) -> Self {
        SvdMode::Randomized {
            oversample: DEFAULT_OVERSAMPLE,
            power_iters: DEFAULT_POWER_ITERS,
            seed,
        }
    }
}

fn check_rank(a: &DenseMatrix, r: usize) -> Result<()> {
    let max = a.rows().min(a.cols());
    if r > max {
        return Err(Error::RankTooLarge { rank: r, max });
    }
    Ok(())
}

/// Top eigenpairs of `AᵀA` (when `cols ≤ rows`) or `AAᵀ`, descending.
fn gram_top(a: &DenseMatrix, r: usize, right: bool) -> Result<(Vec<f64>, DenseMatrix)> {
    let gram = if right {
        a.t_matmul(a)?
    } else {
        a.matmul_t(a)?
    };
    let eig = sym_eig(&gram)?;
    let n = eig.dim();
    let values = (0..r).map(|i| eig.values[n - 1 - i]).collect();
    let vectors = DenseMatrix::from_fn(n, r, |row, c| eig.vectors[(row, n - 1 - c)]);
    Ok((values, vectors))
}

/// Exact rank-`r` truncated SVD.
///
/// Each right singular vector is sign-normalized so that its first
/// component with magnitude above `1e-12` is positive.
pub fn exact_svd(a: &DenseMatrix, r: usize) -> Result<Svd> {
    check_rank(a, r)?;
    let right = a.cols() <= a.rows();
    let (values, basis) = gram_top(a, r, right)?;
    let sigma: Vec<f64> = values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let tol = sigma.first().copied().unwrap_or(0.0) * 1e-7;

    // Recover the other side: u = A v / σ or v = Aᵀ u / σ.
    let other = if right {
        a.matmul(&basis)?
    } else {
        a.t_matmul(&basis)?
    };
    let mut degenerate = Vec::new();
    let mut other = other;
    for (c, &s) in sigma.iter().enumerate() {
        if s > tol && s > 0.0 {
            for i in 0..other.rows() {
                other[(i, c)] /= s;
            }
        } else {
            degenerate.push(c);
        }
    }
    complete_orthonormal(&mut other, &degenerate);

    let (mut u, mut v) = if right {
        (other, basis)
    } else {
        (basis, other)
    };
    fix_signs(&mut u, &mut v);
    Ok(Svd { u, sigma, v })
}

fn fix_signs(u: &mut DenseMatrix, v: &mut DenseMatrix) {
    for c in 0..v.cols() {
        let lead = (0..v.rows()).map(|i| v[(i, c)]).find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..v.rows() {
                v[(i, c)] = -v[(i, c)];
            }
            for i in 0..u.rows() {
                u[(i, c)] = -u[(i, c)];
            }
        }
    }
}

/// Replaces the listed columns with unit vectors orthogonal to every other
/// column, drawn from the standard basis in index order.
fn complete_orthonormal(m: &mut DenseMatrix, cols: &[usize]) {
    if cols.is_empty() {
        return;
    }
    let n = m.rows();
    let mut candidate = 0;
    for &c in cols {
        for i in 0..n {
            m[(i, c)] = 0.0;
        }
        while candidate < n {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in 0..m.cols() {
                    if other == c {
                        continue;
                    }
                    let proj: f64 = (0..n).map(|i| m[(i, other)] * e[i]).sum();
                    for (i, ei) in e.iter_mut().enumerate() {
                        *ei -= proj * m[(i, other)];
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (i, ei) in e.iter().enumerate() {
                    m[(i, c)] = ei / norm;
                }
                break;
            }
        }
    }
}

/// Orthonormalizes columns in place with two passes of modified Gram-Schmidt.
/// Columns that vanish (exactly dependent) are left at zero.
pub(crate) fn orthonormalize(m: &mut DenseMatrix) {
    let (rows, cols) = m.shape();
    let mut col_data: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    for j in 0..cols {
        let original = col_data[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for k in 0..j {
                let (done, rest) = col_data.split_at_mut(j);
                let q = &done[k];
                let proj: f64 = q.iter().zip(rest[0].iter()).map(|(a, b)| a * b).sum();
                for (x, qi) in rest[0].iter_mut().zip(q) {
                    *x -= proj * qi;
                }
            }
        }
        let norm = col_data[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-14 * original && norm > 0.0 {
            for x in col_data[j].iter_mut() {
                *x /= norm;
            }
        } else {
            col_data[j].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    for (j, c) in col_data.iter().enumerate() {
        debug_assert_eq!(c.len(), rows);
        m.set_col(j, c);
    }
}

/// Randomized truncated SVD with Gaussian sketching, `oversample` extra
/// sketch columns and `power_iters` re-orthonormalized power iterations.
pub fn randomized_svd(
    a: &DenseMatrix,
    r: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<Svd> {
    check_rank(a, r)?;
    let (m, n) = a.shape();
    let width = (r + oversample).min(m.min(n));
    if r == 0 {
        return Ok(Svd {
            u: DenseMatrix::zeros(m, 0),
            sigma: Vec::new(),
            v: DenseMatrix::zeros(n, 0),
        });
    }
    let mut rng = stream_rng(seed, Stream::Rsvd);
    let omega = DenseMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));

    let mut q = a.matmul(&omega)?;
    orthonormalize(&mut q);
    for _ in 0..power_iters {
        let mut z = a.t_matmul(&q)?;
        orthonormalize(&mut z);
        q = a.matmul(&z)?;
        orthonormalize(&mut q);
    }

    let b = q.t_matmul(a)?;
    let small = exact_svd(&b, r)?;
    let mut u = q.matmul(&small.u)?;
    let tol = small.sigma.first().copied().unwrap_or(0.0) * 1e-7;
    let degenerate: Vec<usize> = small
        .sigma
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= tol || s == 0.0)
        .map(|(i, _)| i)
        .collect();
    complete_orthonormal(&mut u, &degenerate);
    Ok(Svd {
        u,
        sigma: small.sigma,
        v: small.v,
    })
}

/// All singular values, descending, by one-sided Jacobi rotations.
///
/// Unlike the Gram route this resolves singular values far below
/// `sqrt(eps) · σ_max`, which the numerical-rank test needs.
pub fn singular_values(a: &DenseMatrix) -> Result<Vec<f64>> {
    let work = if a.cols() <= a.rows() {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = work.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.col(j)).collect();
    const MAX_SWEEPS: usize = 60;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            algorithm: "one-sided Jacobi SVD",
            iterations: MAX_SWEEPS,
        });
    }
    debug_assert!(cols.iter().all(|c| c.len() == m));
    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

/// Best rank-`r` approximation `P_r(A)`.
pub fn rank_r_project(a: &DenseMatrix, r: usize, mode: SvdMode) -> Result<DenseMatrix> {
    check_rank(a, r)?;
    let (m, n) = a.shape();
    if r == 0 {
        return Ok(DenseMatrix::zeros(m, n));
    }
    if r == m.min(n) {
        return Ok(a.clone());
    }
    match mode {
        SvdMode::Exact => {
            // Project onto the dominant singular subspace directly; this stays
            // accurate even when trailing singular values are tiny.
            if n <= m {
                let (_, v) = gram_top(a, r, true)?;
                a.matmul(&v)?.matmul_t(&v)
            } else {
                let (_, u) = gram_top(a, r, false)?;
                u.matmul(&u.t_matmul(a)?)
            }
        }
        SvdMode::Randomized {
            oversample,
            power_iters,
            seed,
        } => Ok(randomized_svd(a, r, oversample, power_iters, seed)?.reconstruct()),
    }
}
