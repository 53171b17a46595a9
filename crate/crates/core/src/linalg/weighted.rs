use super::{rank_r_project, sym_eig, DenseMatrix, SvdMode, SymEig};
use crate::error::{Error, Result};

/// Cached factorization of a strictly positive-definite weighting `H′`.
///
/// With `H′ = UΣUᵀ` it stores the square-root factors `Σ^{1/2}Uᵀ` and
/// `UΣ^{-1/2}`; these are not symmetric, but `‖Σ^{1/2}Uᵀ E‖_F` equals
/// `‖H′^{1/2} E‖_F` and the pair are mutual inverses.
#[derive(Debug, Clone)]
pub struct HOperator {
    eig: SymEig,
    h: DenseMatrix,
    sqrt: DenseMatrix,
    inv_sqrt: DenseMatrix,
}

impl HOperator {
    pub fn new(h: &DenseMatrix) -> Result<Self> {
        let eig = sym_eig(h)?;
        Self::from_eig(eig)
    }

    /// Diagonal weighting `diag(d)`; skips the eigen-solver.
    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        let n = d.len();
        let eig = SymEig {
            vectors: DenseMatrix::identity(n),
            values: d.to_vec(),
        };
        // Keep the ascending-eigenvalue contract.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
        let eig = SymEig {
            vectors: DenseMatrix::from_fn(n, n, |r, c| eig.vectors[(r, order[c])]),
            values: order.iter().map(|&i| d[i]).collect(),
        };
        Self::from_eig(eig)
    }

    fn from_eig(eig: SymEig) -> Result<Self> {
        let smallest = eig.values.first().copied().unwrap_or(1.0);
        if !(smallest > 0.0) {
            return Err(Error::NotPositiveDefinite(smallest));
        }
        let root: Vec<f64> = eig.values.iter().map(|v| v.sqrt()).collect();
        let inv_root: Vec<f64> = root.iter().map(|v| 1.0 / v).collect();
        let sqrt = eig.vectors.scale_cols(&root).transpose();
        let inv_sqrt = eig.vectors.scale_cols(&inv_root);
        let h = eig.reconstruct();
        Ok(Self {
            eig,
            h,
            sqrt,
            inv_sqrt,
        })
    }

    pub fn dim(&self) -> usize {
        self.eig.dim()
    }

    pub fn eig(&self) -> &SymEig {
        &self.eig
    }

    /// The weighting matrix `H′` as reassembled from its eigendecomposition.
    pub fn matrix(&self) -> &DenseMatrix {
        &self.h
    }

    /// `Σ^{1/2}Uᵀ`.
    pub fn sqrt_factor(&self) -> &DenseMatrix {
        &self.sqrt
    }

    /// `UΣ^{-1/2}`.
    pub fn inv_sqrt_factor(&self) -> &DenseMatrix {
        &self.inv_sqrt
    }

    pub fn apply(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        self.h.matmul(b)
    }

    /// `‖H′^{1/2} E‖²_F`.
    pub fn weighted_norm_sq(&self, e: &DenseMatrix) -> Result<f64> {
        Ok(self.sqrt.matmul(e)?.frobenius_norm_sq())
    }
}

/// `(H′ + ρI)⁻¹ B` through the cached eigendecomposition.
pub fn shifted_inverse_apply(hop: &HOperator, rho: f64, b: &DenseMatrix) -> Result<DenseMatrix> {
    if b.rows() != hop.dim() {
        return Err(Error::ShapeMismatch {
            op: "shifted_inverse_apply",
            lhs: (hop.dim(), hop.dim()),
            rhs: b.shape(),
        });
    }
    assert!(rho > 0.0, "rho must be positive");
    let u = &hop.eig.vectors;
    let inv: Vec<f64> = hop.eig.values.iter().map(|s| 1.0 / (s + rho)).collect();
    let projected = u.t_matmul(b)?.scale_rows(&inv);
    u.matmul(&projected)
}

/// `argmin_{rank(L) ≤ r} ‖H′^{1/2}(R − L)‖_F`, i.e.
/// `L = H′^{-1/2} P_r(H′^{1/2} R)`.
pub fn rank_r_weighted_fit(
    hop: &HOperator,
    residual: &DenseMatrix,
    r: usize,
    mode: SvdMode,
) -> Result<DenseMatrix> {
    if residual.rows() != hop.dim() {
        return Err(Error::ShapeMismatch {
            op: "rank_r_weighted_fit",
            lhs: (hop.dim(), hop.dim()),
            rhs: residual.shape(),
        });
    }
    let (m, n) = residual.shape();
    if r == 0 {
        return Ok(DenseMatrix::zeros(m, n));
    }
    let transformed = hop.sqrt.matmul(residual)?;
    let projected = rank_r_project(&transformed, r, mode)?;
    hop.inv_sqrt.matmul(&projected)
}
