//! Projection onto sparsity constraint sets and support-set algebra.
//!
//! N:M groups run over `M` consecutive entries of each row. Ties in the
//! selection score are broken by the lowest flat index, and exact zeros can
//! be selected, so a projected support always holds exactly `k` entries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsityPattern {
    /// Keep `round_half_even(keep_fraction · numel)` entries anywhere.
    Unstructured { keep_fraction: f64 },
    /// Keep `n` of every `m` consecutive entries along each row.
    SemiStructured { n: usize, m: usize },
}

impl SparsityPattern {
    pub fn nm(n: usize, m: usize) -> Self {
        SparsityPattern::SemiStructured { n, m }
    }

    pub fn unstructured(keep_fraction: f64) -> Self {
        SparsityPattern::Unstructured { keep_fraction }
    }

    /// Checks the pattern parameters on their own.
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityPattern::Unstructured { keep_fraction } => {
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                    return Err(Error::InvalidConfig {
                        field: "sparsity",
                        message: format!("keep fraction {keep_fraction} outside (0, 1]"),
                    });
                }
            }
            SparsityPattern::SemiStructured { n, m } => {
                if !(n > 0 && n < m) {
                    return Err(Error::InvalidConfig {
                        field: "sparsity",
                        message: format!("N:M = {n}:{m} requires 0 < N < M"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks that the pattern applies to a `rows × cols` matrix.
    pub fn validate_for(&self, _rows: usize, cols: usize) -> Result<()> {
        self.validate()?;
        if let SparsityPattern::SemiStructured { m, .. } = *self {
            if !cols.is_multiple_of(m) {
                return Err(Error::PatternMismatch {
                    pattern: self.to_string(),
                    row_len: cols,
                });
            }
        }
        Ok(())
    }

    /// Number of retained entries for a `rows × cols` matrix.
    pub fn keep_count(&self, rows: usize, cols: usize) -> usize {
        let numel = rows * cols;
        match *self {
            SparsityPattern::Unstructured { keep_fraction } => {
                ((keep_fraction * numel as f64).round_ties_even() as usize).min(numel)
            }
            SparsityPattern::SemiStructured { n, m } => numel / m * n,
        }
    }

    /// True when `support` is feasible for this pattern.
    pub fn admits(&self, support: &Support) -> bool {
        match *self {
            SparsityPattern::Unstructured { .. } => {
                support.popcount() <= self.keep_count(support.rows, support.cols)
            }
            SparsityPattern::SemiStructured { n, m } => {
                support.cols.is_multiple_of(m)
                    && support
                        .mask
                        .chunks(m)
                        .all(|g| g.iter().filter(|&&b| b).count() <= n)
            }
        }
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityPattern::Unstructured { keep_fraction } => {
                write!(f, "unstructured:{keep_fraction}")
            }
            SparsityPattern::SemiStructured { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for SparsityPattern {
    type Err = String;

    /// Accepts `N:M` or `unstructured:<keep_fraction>`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some(frac) = s.strip_prefix("unstructured:") {
            let keep_fraction = frac
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad keep fraction {frac:?}: {e}"))?;
            return Ok(SparsityPattern::Unstructured { keep_fraction });
        }
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `N:M` or `unstructured:<fraction>`, got {s:?}"))?;
        let n = n
            .trim()
            .parse()
            .map_err(|e| format!("bad N in {s:?}: {e}"))?;
        let m = m
            .trim()
            .parse()
            .map_err(|e| format!("bad M in {s:?}: {e}"))?;
        Ok(SparsityPattern::SemiStructured { n, m })
    }
}

/// Boolean mask with the shape of the matrix it describes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
}

impl Support {
    pub fn new(rows: usize, cols: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), rows * cols, "mask length");
        Self { rows, cols, mask }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![false; rows * cols])
    }

    /// Nonzero entries of `a`.
    pub fn of_nonzeros(a: &DenseMatrix) -> Self {
        Self::new(
            a.rows(),
            a.cols(),
            a.as_slice().iter().map(|&v| v != 0.0).collect(),
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.cols + j]
    }

    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// True when every retained position of `self` is retained in `other`.
    pub fn is_subset_of(&self, other: &Support) -> bool {
        self.shape() == other.shape() && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// 0/1 matrix.
    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_vec(
            self.rows,
            self.cols,
            self.mask
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("mask shape")
    }
}

/// Per-entry selection weights, broadcast from a full matrix, a column
/// vector (one weight per row) or a row vector (one weight per column).
fn weight_lookup<'a>(
    weights: Option<&'a DenseMatrix>,
    rows: usize,
    cols: usize,
) -> Result<impl Fn(usize, usize) -> f64 + 'a> {
    if let Some(w) = weights {
        let ok = matches!(w.shape(), (r, c) if (r == rows || r == 1) && (c == cols || c == 1));
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "project weights",
                lhs: (rows, cols),
                rhs: w.shape(),
            });
        }
        if let Some(&bad) = w.as_slice().iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::NonPositiveWeight(bad));
        }
    }
    Ok(move |i: usize, j: usize| match weights {
        None => 1.0,
        Some(w) => {
            let wi = if w.rows() == 1 { 0 } else { i };
            let wj = if w.cols() == 1 { 0 } else { j };
            w[(wi, wj)]
        }
    })
}

/// Projects `a` onto the pattern, keeping the entries that maximize
/// `Σ (w·a)²`. Retained entries keep their original (unweighted) values.
pub fn project(
    a: &DenseMatrix,
    pattern: SparsityPattern,
    weights: Option<&DenseMatrix>,
) -> Result<(DenseMatrix, Support)> {
    let (rows, cols) = a.shape();
    pattern.validate_for(rows, cols)?;
    let weight = weight_lookup(weights, rows, cols)?;
    let score = |flat: usize| {
        let (i, j) = (flat / cols, flat % cols);
        let v = weight(i, j) * a.as_slice()[flat];
        v * v
    };
    // Larger score first; equal scores resolve to the lower flat index.
    let order = |x: &usize, y: &usize| score(*y).total_cmp(&score(*x)).then(x.cmp(y));

    let mut mask = vec![false; rows * cols];
    match pattern {
        SparsityPattern::Unstructured { .. } => {
            let k = pattern.keep_count(rows, cols);
            let mut idx: Vec<usize> = (0..rows * cols).collect();
            idx.sort_by(order);
            for &f in &idx[..k] {
                mask[f] = true;
            }
        }
        SparsityPattern::SemiStructured { n, m } => {
            let mut group: Vec<usize> = Vec::with_capacity(m);
            for start in (0..rows * cols).step_by(m) {
                group.clear();
                group.extend(start..start + m);
                group.sort_by(order);
                for &f in &group[..n] {
                    mask[f] = true;
                }
            }
        }
    }
    let support = Support::new(rows, cols, mask);
    let out = apply_support(a, &support)?;
    Ok((out, support))
}

/// `A ⊙ mask`.
pub fn apply_support(a: &DenseMatrix, support: &Support) -> Result<DenseMatrix> {
    if a.shape() != support.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_support",
            lhs: a.shape(),
            rhs: support.shape(),
        });
    }
    let data = a
        .as_slice()
        .iter()
        .zip(&support.mask)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), data)
}

/// Number of positions retained by exactly one of the two supports.
pub fn support_symmetric_difference(a: &Support, b: &Support) -> Result<usize> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "support_symmetric_difference",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(a.mask.iter().zip(&b.mask).filter(|(x, y)| x != y).count())
}
