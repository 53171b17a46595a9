use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"SLRT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("value {value} at flat index {index} does not fit in f32")]
    NarrowingOverflow { index: usize, value: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid value for `{field}`: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("{algorithm} did not converge within {iterations} iterations")]
    NoConvergence {
        algorithm: &'static str,
        iterations: usize,
    },

    #[error("rank {rank} exceeds min(rows, cols) = {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("sparsity pattern {pattern} does not fit a row of length {row_len}")]
    PatternMismatch { pattern: String, row_len: usize },

    #[error("projection weights must be strictly positive (found {0})")]
    NonPositiveWeight(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss diverged: {loss:e} exceeds 10x the initial loss {initial:e}")]
    Divergence { loss: f64, initial: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::NoConvergence { .. }
                | Error::NonFinite(_)
                | Error::Divergence { .. }
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad-magic",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::UnsupportedDtype(_) => "unsupported-dtype",
            Error::TruncatedPayload { .. } => "truncated-payload",
            Error::TrailingBytes(_) => "trailing-bytes",
            Error::InvalidShape { .. } => "invalid-shape",
            Error::NarrowingOverflow { .. } => "dtype-narrowing-overflow",
            Error::Parse { .. } => "parse-error",
            Error::InvalidConfig { .. } => "invariant-violation",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NotSymmetric(_) => "non-symmetric",
            Error::NotPositiveDefinite(_) => "not-positive-definite",
            Error::NoConvergence { .. } => "no-convergence",
            Error::RankTooLarge { .. } => "rank-too-large",
            Error::PatternMismatch { .. } => "pattern-mismatch",
            Error::NonPositiveWeight(_) => "non-positive-weight",
            Error::NonFinite(_) => "non-finite",
            Error::Divergence { .. } => "divergence",
        }
    }
}
