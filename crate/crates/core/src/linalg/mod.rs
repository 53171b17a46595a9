//! Dense kernels: matrix type, symmetric eigendecomposition, truncated SVD
//! and the rank-constrained weighted least-squares fit.

mod eig;
mod matrix;
mod svd;
mod weighted;

pub use eig::{sym_eig, SymEig};
pub use matrix::{dot, DenseMatrix};
pub use svd::{
    exact_svd, randomized_svd, rank_r_project, singular_values, Svd, SvdMode, DEFAULT_OVERSAMPLE,
    DEFAULT_POWER_ITERS,
};
pub use weighted::{rank_r_weighted_fit, shifted_inverse_apply, HOperator};

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn numerical_rank(a: &DenseMatrix, rel_tol: f64) -> crate::Result<usize> {
    let k = a.rows().min(a.cols());
    if k == 0 {
        return Ok(0);
    }
    let sigma = singular_values(a)?;
    let top = sigma[0];
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sigma.iter().filter(|&&x| x > rel_tol * top).count())
}
