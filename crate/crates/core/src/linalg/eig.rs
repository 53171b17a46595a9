//! Symmetric eigendecomposition by the cyclic Jacobi method.

use super::DenseMatrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-10;

/// `H = U · diag(values) · Uᵀ` with eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Orthogonal; column `i` pairs with `values[i]`.
    pub vectors: DenseMatrix,
    pub values: Vec<f64>,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let scaled = self.vectors.scale_cols(&self.values);
        scaled.matmul_t(&self.vectors).expect("square factors")
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// Input must be symmetric to `1e-10` relative to its largest entry; it is
/// symmetrized before the sweeps.
pub fn sym_eig(h: &DenseMatrix) -> Result<SymEig> {
    let n = h.rows();
    if h.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "sym_eig",
            lhs: h.shape(),
            rhs: (n, n),
        });
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let asym = h.asymmetry();
    if asym > SYMMETRY_TOL * h.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym));
    }

    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));
    let mut v = DenseMatrix::identity(n);
    let scale = a.frobenius_norm();

    let mut converged = n <= 1 || scale == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        converged = off_diagonal_norm(&a) <= 1e-15 * scale;
    }
    if !converged {
        return Err(Error::NoConvergence {
            algorithm: "cyclic Jacobi",
            iterations: MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { vectors, values })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            s += 2.0 * a[(p, q)] * a[(p, q)];
        }
    }
    s.sqrt()
}

/// Zeroes `a[p][q]` with a plane rotation and accumulates it into `v`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    if apq.abs() <= 1e-18 * (app.abs() + aqq.abs()) {
        a[(p, q)] = 0.0;
        a[(q, p)] = 0.0;
        return;
    }
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    let n = a.rows();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a[(k, p)] = new_kp;
        a[(p, k)] = new_kp;
        a[(k, q)] = new_kq;
        a[(q, k)] = new_kq;
    }
    a[(p, p)] = app - t * apq;
    a[(q, q)] = aqq + t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = stream_rng(seed, Stream::Test);
        let a = DenseMatrix::from_fn(n + 3, n, |_, _| StandardNormal.sample(&mut rng));
        let mut g = a.t_matmul(&a).unwrap();
        for i in 0..n {
            g[(i, i)] += 0.1;
        }
        g
    }

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&DenseMatrix::from_diag(&[2.0, 5.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 5.0]);
        assert_eq!(e.vectors, DenseMatrix::identity(2));

        let e = sym_eig(&DenseMatrix::from_diag(&[5.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 5.0]);
        assert_eq!(
            e.vectors,
            DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])
        );
    }

    #[test]
    fn two_by_two_analytic() {
        let h = DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let e = sym_eig(&h).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn random_spd_reconstructs() {
        for seed in 0..5 {
            let h = random_spd(16, seed);
            let e = sym_eig(&h).unwrap();
            let resid = (&e.reconstruct() - &h).frobenius_norm();
            assert!(resid < 1e-10 * h.frobenius_norm(), "residual {resid}");
            let orth = (&e.vectors.t_matmul(&e.vectors).unwrap() - &DenseMatrix::identity(16))
                .frobenius_norm();
            assert!(orth <= 1e-8 * 4.0);
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let h = DenseMatrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&h), Err(Error::NotSymmetric(_))));
        assert!(sym_eig(&DenseMatrix::zeros(2, 3)).is_err());
    }
}
