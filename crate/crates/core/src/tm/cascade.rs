use rayon::prelude::*;

use super::block::{
    block_apply, block_forward, BlockParams, BlockSpec, DecomposedLayer, Layer, LayerWeights,
};
use super::refine::{tm_refine, TmOutcome};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::solver::{decompose, mean_gram, LayerProblem};
use crate::tensor_io::{RunConfig, RunReport};

/// One layer-wise compression of a block: per-layer problems are built
/// from the block's own activations on `xs` and solved independently.
#[derive(Debug, Clone)]
pub struct CompressedBlock {
    pub params: BlockParams,
    /// Indexed by [`Layer::index`].
    pub reports: Vec<RunReport>,
    pub tm: Option<TmOutcome>,
}

/// Layer problems for every projection of `dense`, with Gram matrices
/// averaged over all tokens of `xs`.
pub fn layer_problems(
    spec: &BlockSpec,
    dense: &BlockParams,
    xs: &[DenseMatrix],
    config: &RunConfig,
) -> Result<Vec<LayerProblem>> {
    let (_, tape) = block_forward(spec, dense, xs)?;
    Layer::ALL
        .iter()
        .map(|&l| {
            let inputs: Vec<DenseMatrix> = tape.layer_input(l).into_iter().cloned().collect();
            let gram = mean_gram(&inputs)?;
            LayerProblem::new(
                dense.layer(l).effective(),
                gram,
                config.lambda,
                config.sparsity,
                config.rank,
            )
        })
        .collect()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig {
            field: "workers",
            message: e.to_string(),
        })
}

/// Decomposes all seven projections of `dense` with the method selected in
/// `config`, solving layers concurrently on `workers` threads. The result
/// does not depend on `workers`.
pub fn compress_block(
    spec: &BlockSpec,
    dense: &BlockParams,
    xs: &[DenseMatrix],
    config: &RunConfig,
    workers: usize,
) -> Result<CompressedBlock> {
    let problems = layer_problems(spec, dense, xs, config)?;
    let solved: Vec<Result<_>> = pool(workers)?.install(|| {
        problems
            .par_iter()
            .map(|p| {
                let dec = decompose(p, config)?;
                let layer = DecomposedLayer::from_parts(&dec.sparse, &dec.low_rank, p.rank)?;
                Ok((layer, dec.report))
            })
            .collect()
    });
    let mut params = dense.clone();
    let mut reports = Vec::with_capacity(problems.len());
    for (l, res) in Layer::ALL.iter().zip(solved) {
        let (layer, mut report) = res?;
        report.summary.workers = Some(workers.max(1));
        report.summary.notes.push(format!("layer {}", l.name()));
        params.layers[l.index()] = LayerWeights::Decomposed(layer);
        reports.push(report);
    }
    Ok(CompressedBlock {
        params,
        reports,
        tm: None,
    })
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub blocks: Vec<CompressedBlock>,
    /// `X₁ … X_{B+1}`: the calibration inputs followed by each compressed
    /// block's outputs.
    pub activations: Vec<Vec<DenseMatrix>>,
}

/// Compresses a stack of blocks in order. Block `i` is compressed (and, if
/// `config.tm` is set, refined) against the outputs of the already
/// compressed blocks before it, and its compressed outputs feed block
/// `i + 1`.
pub fn cascade_compress(
    spec: &BlockSpec,
    blocks: &[BlockParams],
    x0: &[DenseMatrix],
    config: &RunConfig,
    workers: usize,
) -> Result<CascadeOutput> {
    cascade_with(spec, blocks, x0, config, workers, |_| config.tm.is_some())
}

/// Like [`cascade_compress`] with TM applied only where `use_tm(i)` holds.
pub fn cascade_with(
    spec: &BlockSpec,
    blocks: &[BlockParams],
    x0: &[DenseMatrix],
    config: &RunConfig,
    workers: usize,
    use_tm: impl Fn(usize) -> bool,
) -> Result<CascadeOutput> {
    if blocks.is_empty() {
        return Err(Error::InvalidConfig {
            field: "blocks",
            message: "cascade needs at least one block".into(),
        });
    }
    let hyper = config.tm.unwrap_or_default();
    let mut activations = vec![x0.to_vec()];
    let mut out = Vec::with_capacity(blocks.len());
    for (i, dense) in blocks.iter().enumerate() {
        let xs = activations.last().expect("seeded with x0");
        let mut compressed = compress_block(spec, dense, xs, config, workers)?;
        if use_tm(i) {
            let tm = tm_refine(
                spec,
                dense,
                &compressed.params,
                xs,
                &hyper,
                config.seed ^ i as u64,
            )?;
            compressed.params = tm.params.clone();
            compressed.tm = Some(tm);
        }
        let next = block_apply(spec, &compressed.params, xs)?;
        activations.push(next);
        out.push(compressed);
    }
    Ok(CascadeOutput {
        blocks: out,
        activations,
    })
}

/// Outputs of the uncompressed stack on `x0`, block by block.
pub fn dense_propagation(
    spec: &BlockSpec,
    blocks: &[BlockParams],
    x0: &[DenseMatrix],
) -> Result<Vec<Vec<DenseMatrix>>> {
    let mut acts = vec![x0.to_vec()];
    for b in blocks {
        let next = block_apply(spec, b, acts.last().expect("seeded"))?;
        acts.push(next);
    }
    Ok(acts)
}
