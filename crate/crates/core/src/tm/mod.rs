//! Transformer matching: joint refinement of all decomposed layers of a
//! block against the dense block's outputs, and block-by-block cascading.

mod adam;
mod block;
mod cascade;
mod refine;

pub use adam::{cosine_lr, Adam};
pub use block::{
    block_apply, block_backward, block_forward, output_error, BlockGrads, BlockParams, BlockSpec,
    DecomposedLayer, Layer, LayerWeights, Tape, RMS_EPS,
};
pub use cascade::{
    cascade_compress, cascade_with, compress_block, dense_propagation, layer_problems,
    CascadeOutput, CompressedBlock,
};
pub use refine::{tm_refine, TmHyper, TmOutcome};
