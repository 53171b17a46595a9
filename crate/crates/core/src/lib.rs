//! Sparse plus low-rank decomposition of linear layers.
//!
//! Each layer weight `Ŵ` (`n_in × n_out`, applied as `y = xŴ`) is
//! approximated by `S + L`, `S` obeying an unstructured or N:M sparsity
//! pattern and `rank(L) ≤ r`, so that outputs on calibration inputs `X`
//! are preserved:
//!
//! ```text
//! min ½‖XŴ − X(S + L)‖²_F + (λ/2)‖Ŵ − S − L‖²_F
//! ```
//!
//! [`solver::solve_3basil`] solves this with 3-block ADMM;
//! [`baselines`] holds the alternating-minimization reference methods.
//! [`tm`] refines all decomposed layers of a transformer block jointly.

// `!(x > 0.0)` style guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod solver;
pub mod sparsity;
pub mod synth;
pub mod tensor_io;
pub mod tm;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use solver::{decompose, objective, solve_3basil, Decomposition, LayerProblem};
pub use sparsity::{SparsityPattern, Support};
pub use tensor_io::{RunConfig, RunReport};
