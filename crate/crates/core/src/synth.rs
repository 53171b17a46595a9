//! Synthetic layers, calibration activations and toy transformer blocks.
//!
//! Activations are drawn as `X = Z·M·diag(c)` with Gaussian `Z`, a dense
//! mixing matrix `M = I + 0.6·G/√n` and log-normal channel scales `c`, so
//! the Gram matrix has correlated, unevenly scaled input channels like real
//! layer inputs do.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::rng::{stream_rng, Stream};
use crate::solver::{mean_gram, LayerProblem};
use crate::sparsity::{project, SparsityPattern};
use crate::tm::{BlockParams, BlockSpec};

/// Weight scale of toy blocks (the customary transformer init).
pub const TOY_WEIGHT_STD: f64 = 0.02;

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Channel-mixing transform `M·diag(c)` shared by all sequences of one
/// calibration set.
pub fn channel_mixing(n: usize, rng: &mut impl Rng) -> DenseMatrix {
    let g = gaussian(n, n, rng);
    let scale = 0.6 / (n as f64).sqrt();
    let log_scale = Normal::<f64>::new(0.0, 0.5).expect("valid");
    let c: Vec<f64> = (0..n).map(|_| log_scale.sample(rng).exp()).collect();
    let mut m = g.scale(scale);
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    m.scale_cols(&c)
}

/// `count` activation blocks of `tokens × n` with correlated channels.
pub fn correlated_activations(
    count: usize,
    tokens: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<DenseMatrix> {
    let mix = channel_mixing(n, rng);
    (0..count)
        .map(|_| gaussian(tokens, n, rng).matmul(&mix).expect("shapes"))
        .collect()
}

/// Gaussian weights with variance `1/n_in`.
pub fn random_weights(n_in: usize, n_out: usize, rng: &mut impl Rng) -> DenseMatrix {
    gaussian(n_in, n_out, rng).scale(1.0 / (n_in as f64).sqrt())
}

/// Scale of the planted low-rank part relative to the sparse part.
pub const PLANTED_LOW_RANK_SCALE: f64 = 0.1;

/// `Ŵ = S* + A*B*ᵀ + noise·E` with `S*` feasible for `pattern` and
/// `rank(A*B*ᵀ) = rank`. Returns `(Ŵ, S*, A*B*ᵀ)`.
///
/// Kept entries of `S*` have magnitude at least `1/√n_in` and the
/// low-rank part is [`PLANTED_LOW_RANK_SCALE`] times smaller, so the
/// support of `S*` stands out of `Ŵ` and the split is identifiable.
pub fn planted_weights(
    n_in: usize,
    n_out: usize,
    pattern: SparsityPattern,
    rank: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let unit = 1.0 / (n_in as f64).sqrt();
    let (s_star, _) = project(&random_weights(n_in, n_out, rng), pattern, None)?;
    let s_star = s_star.map(|v| if v == 0.0 { 0.0 } else { v + unit.copysign(v) });
    let a = gaussian(n_in, rank, rng);
    let b = gaussian(n_out, rank, rng);
    let l_star = a.matmul_t(&b)?.scale(PLANTED_LOW_RANK_SCALE * unit);
    let mut w = &s_star + &l_star;
    if noise > 0.0 {
        w.axpy(noise, &random_weights(n_in, n_out, rng))?;
    }
    Ok((w, s_star, l_star))
}

/// A benchmark layer: `n × n` Gaussian weights and the mean Gram matrix of
/// 8 correlated blocks of `2n` tokens, all derived from `seed`.
pub fn benchmark_problem(
    seed: u64,
    n: usize,
    pattern: SparsityPattern,
    rank: usize,
    lambda: f64,
) -> Result<LayerProblem> {
    let mut rng = stream_rng(seed, Stream::Gen);
    let w = random_weights(n, n, &mut rng);
    let xs = correlated_activations(8, 2 * n, n, &mut rng);
    LayerProblem::new(w, mean_gram(&xs)?, lambda, pattern, rank)
}

/// Random dense block with [`TOY_WEIGHT_STD`] weights and norm scales
/// near one.
pub fn toy_block(spec: &BlockSpec, rng: &mut impl Rng) -> BlockParams {
    let mut params = BlockParams::random(spec, TOY_WEIGHT_STD, rng);
    let jitter = Normal::new(1.0, 0.1).expect("valid");
    for g in params
        .norm_attn
        .iter_mut()
        .chain(params.norm_mlp.iter_mut())
    {
        *g = jitter.sample(rng);
    }
    params
}

/// Calibration sequences `seq_len × d_model` for a toy block.
pub fn toy_calibration(spec: &BlockSpec, count: usize, rng: &mut impl Rng) -> Vec<DenseMatrix> {
    correlated_activations(count, spec.seq_len, spec.d_model, rng)
}
