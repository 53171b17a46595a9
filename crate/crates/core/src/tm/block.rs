//! A pre-norm Llama-style transformer block with a hand-written backward
//! pass.
//!
//! For one sequence `x` (`seq × d_model`), with row-vector activations and
//! `y = xW` linear layers:
//!
//! ```text
//! h  = RMSNorm(x; γ_attn)
//! x₁ = x + Attn(hW_q, hW_k, hW_v) W_o          (causal, per head)
//! h₂ = RMSNorm(x₁; γ_mlp)
//! y  = x₁ + (SiLU(h₂W_gate) ⊙ h₂W_up) W_down
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{exact_svd, DenseMatrix};
use crate::sparsity::Support;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
}

impl BlockSpec {
    pub fn new(d_model: usize, n_heads: usize, d_ff: usize, seq_len: usize) -> Result<Self> {
        let spec = Self {
            d_model,
            n_heads,
            d_ff,
            seq_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.seq_len == 0 {
            return Err(Error::InvalidConfig {
                field: "block",
                message: "all block dimensions must be positive".into(),
            });
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig {
                field: "n_heads",
                message: format!(
                    "{} heads do not divide d_model {}",
                    self.n_heads, self.d_model
                ),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(n_in, n_out)` of a projection.
    pub fn layer_shape(&self, layer: Layer) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match layer {
            Layer::Q | Layer::K | Layer::V | Layer::O => (d, d),
            Layer::Gate | Layer::Up => (d, f),
            Layer::Down => (f, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Layer {
    pub const ALL: [Layer; 7] = [
        Layer::Q,
        Layer::K,
        Layer::V,
        Layer::O,
        Layer::Gate,
        Layer::Up,
        Layer::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Q => "q",
            Layer::K => "k",
            Layer::V => "v",
            Layer::O => "o",
            Layer::Gate => "gate",
            Layer::Up => "up",
            Layer::Down => "down",
        }
    }
}

/// A linear layer stored as `S + ABᵀ` with `S` confined to a frozen mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLayer {
    pub s: DenseMatrix,
    pub mask: Support,
    /// `n_in × r`.
    pub a: DenseMatrix,
    /// `n_out × r`.
    pub b: DenseMatrix,
}

impl DecomposedLayer {
    pub fn new(s: DenseMatrix, mask: Support, a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        let (rows, cols) = s.shape();
        if mask.shape() != (rows, cols) {
            return Err(Error::ShapeMismatch {
                op: "decomposed mask",
                lhs: (rows, cols),
                rhs: mask.shape(),
            });
        }
        if a.rows() != rows || b.rows() != cols || a.cols() != b.cols() {
            return Err(Error::ShapeMismatch {
                op: "decomposed factors",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let s = crate::sparsity::apply_support(&s, &mask)?;
        Ok(Self { s, mask, a, b })
    }

    /// Factors `low_rank` as `ABᵀ` with `A = U√σ`, `B = V√σ` from its
    /// exact rank-`rank` SVD; the mask is the nonzero pattern of `sparse`.
    pub fn from_parts(sparse: &DenseMatrix, low_rank: &DenseMatrix, rank: usize) -> Result<Self> {
        let (rows, cols) = sparse.shape();
        let (a, b) = if rank == 0 {
            (DenseMatrix::zeros(rows, 0), DenseMatrix::zeros(cols, 0))
        } else {
            let svd = exact_svd(low_rank, rank)?;
            let root: Vec<f64> = svd.sigma.iter().map(|s| s.sqrt()).collect();
            (svd.u.scale_cols(&root), svd.v.scale_cols(&root))
        };
        Self::new(sparse.clone(), Support::of_nonzeros(sparse), a, b)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn low_rank(&self) -> DenseMatrix {
        self.a.matmul_t(&self.b).expect("factor shapes checked")
    }

    pub fn effective(&self) -> DenseMatrix {
        &self.s + &self.low_rank()
    }

    /// Splits a gradient with respect to the effective weight into
    /// gradients for `S` (masked), `A` and `B`.
    pub fn split_gradient(&self, dw: &DenseMatrix) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let ds = crate::sparsity::apply_support(dw, &self.mask).expect("same shape");
        let da = dw.matmul(&self.b).expect("shapes");
        let db = dw.t_matmul(&self.a).expect("shapes");
        (ds, da, db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense(DenseMatrix),
    Decomposed(DecomposedLayer),
}

impl LayerWeights {
    pub fn effective(&self) -> DenseMatrix {
        match self {
            LayerWeights::Dense(w) => w.clone(),
            LayerWeights::Decomposed(d) => d.effective(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerWeights::Dense(w) => w.shape(),
            LayerWeights::Decomposed(d) => d.s.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm_attn: Vec<f64>,
    pub norm_mlp: Vec<f64>,
    /// Indexed by [`Layer::index`].
    pub layers: Vec<LayerWeights>,
}

impl BlockParams {
    /// Dense block with `N(0, std²)` weights and unit norm scales.
    pub fn random(spec: &BlockSpec, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let layers = Layer::ALL
            .iter()
            .map(|&l| {
                let (r, c) = spec.layer_shape(l);
                LayerWeights::Dense(DenseMatrix::from_fn(r, c, |_, _| normal.sample(rng)))
            })
            .collect();
        Self {
            norm_attn: vec![1.0; spec.d_model],
            norm_mlp: vec![1.0; spec.d_model],
            layers,
        }
    }

    pub fn layer(&self, layer: Layer) -> &LayerWeights {
        &self.layers[layer.index()]
    }

    pub fn validate(&self, spec: &BlockSpec) -> Result<()> {
        if self.norm_attn.len() != spec.d_model || self.norm_mlp.len() != spec.d_model {
            return Err(Error::ShapeMismatch {
                op: "norm scales",
                lhs: (spec.d_model, 1),
                rhs: (self.norm_attn.len(), self.norm_mlp.len()),
            });
        }
        if self.layers.len() != Layer::ALL.len() {
            return Err(Error::InvalidShape {
                shape: vec![self.layers.len()],
                reason: "a block has exactly 7 projections",
            });
        }
        for l in Layer::ALL {
            if self.layer(l).shape() != spec.layer_shape(l) {
                return Err(Error::ShapeMismatch {
                    op: "block layer",
                    lhs: spec.layer_shape(l),
                    rhs: self.layer(l).shape(),
                });
            }
        }
        Ok(())
    }

    /// Effective weight of every layer, indexed by [`Layer::index`].
    pub fn effective_weights(&self) -> Vec<DenseMatrix> {
        self.layers.iter().map(LayerWeights::effective).collect()
    }
}

/// Intermediates of one sequence.
#[derive(Debug, Clone)]
struct SeqTape {
    x: DenseMatrix,
    rms_attn: Vec<f64>,
    h: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    probs: Vec<DenseMatrix>,
    ctx: DenseMatrix,
    x1: DenseMatrix,
    rms_mlp: Vec<f64>,
    h2: DenseMatrix,
    gate: DenseMatrix,
    up: DenseMatrix,
    act: DenseMatrix,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct Tape {
    spec: BlockSpec,
    weights: Vec<DenseMatrix>,
    norm_attn: Vec<f64>,
    norm_mlp: Vec<f64>,
    seqs: Vec<SeqTape>,
}

impl Tape {
    /// Inputs seen by `layer`, one matrix per sequence.
    pub fn layer_input(&self, layer: Layer) -> Vec<&DenseMatrix> {
        self.seqs
            .iter()
            .map(|t| match layer {
                Layer::Q | Layer::K | Layer::V => &t.h,
                Layer::O => &t.ctx,
                Layer::Gate | Layer::Up => &t.h2,
                Layer::Down => &t.act,
            })
            .collect()
    }
}

/// Gradients of a scalar loss through the block.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    /// With respect to each effective weight, indexed by [`Layer::index`].
    pub weights: Vec<DenseMatrix>,
    pub norm_attn: Vec<f64>,
    pub norm_mlp: Vec<f64>,
    pub input: Vec<DenseMatrix>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rms_norm(x: &DenseMatrix, gamma: &[f64]) -> (DenseMatrix, Vec<f64>) {
    let n = x.cols() as f64;
    let rms: Vec<f64> = (0..x.rows())
        .map(|t| (x.row(t).iter().map(|v| v * v).sum::<f64>() / n + RMS_EPS).sqrt())
        .collect();
    let out = DenseMatrix::from_fn(x.rows(), x.cols(), |t, j| x[(t, j)] / rms[t] * gamma[j]);
    (out, rms)
}

fn rms_norm_backward(
    x: &DenseMatrix,
    rms: &[f64],
    gamma: &[f64],
    dh: &DenseMatrix,
    dgamma: &mut [f64],
) -> DenseMatrix {
    let n = x.cols();
    let mut dx = DenseMatrix::zeros(x.rows(), n);
    for t in 0..x.rows() {
        let r = rms[t];
        let z: Vec<f64> = x.row(t).iter().map(|v| v / r).collect();
        let dz: Vec<f64> = dh.row(t).iter().zip(gamma).map(|(d, g)| d * g).collect();
        for j in 0..n {
            dgamma[j] += dh[(t, j)] * z[j];
        }
        let mean = crate::linalg::dot(&dz, &z) / n as f64;
        for (j, out) in dx.row_mut(t).iter_mut().enumerate() {
            *out = (dz[j] - z[j] * mean) / r;
        }
    }
    dx
}

fn forward_seq(
    spec: &BlockSpec,
    w: &[DenseMatrix],
    g1: &[f64],
    g2: &[f64],
    x: &DenseMatrix,
) -> SeqTape {
    let seq = x.rows();
    let hd = spec.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let (h, rms_attn) = rms_norm(x, g1);
    let q = &h * &w[Layer::Q.index()];
    let k = &h * &w[Layer::K.index()];
    let v = &h * &w[Layer::V.index()];
    let mut ctx = DenseMatrix::zeros(seq, spec.d_model);
    let mut probs = Vec::with_capacity(spec.n_heads);
    for head in 0..spec.n_heads {
        let (qh, kh, vh) = (
            q.columns(head * hd, hd),
            k.columns(head * hd, hd),
            v.columns(head * hd, hd),
        );
        let mut p = qh.matmul_t(&kh).expect("head shapes").scale(scale);
        for i in 0..seq {
            let row = p.row_mut(i);
            let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, e) in row.iter_mut().enumerate() {
                *e = if j <= i { (*e - max).exp() } else { 0.0 };
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        ctx.set_columns(head * hd, &(&p * &vh));
        probs.push(p);
    }
    let x1 = x + &(&ctx * &w[Layer::O.index()]);
    let (h2, rms_mlp) = rms_norm(&x1, g2);
    let gate = &h2 * &w[Layer::Gate.index()];
    let up = &h2 * &w[Layer::Up.index()];
    let act = DenseMatrix::from_fn(gate.rows(), gate.cols(), |i, j| {
        let g = gate[(i, j)];
        g * sigmoid(g) * up[(i, j)]
    });
    SeqTape {
        x: x.clone(),
        rms_attn,
        h,
        q,
        k,
        v,
        probs,
        ctx,
        x1,
        rms_mlp,
        h2,
        gate,
        up,
        act,
    }
}

fn output(t: &SeqTape, w: &[DenseMatrix]) -> DenseMatrix {
    &t.x1 + &(&t.act * &w[Layer::Down.index()])
}

fn check_inputs(spec: &BlockSpec, xs: &[DenseMatrix]) -> Result<()> {
    for x in xs {
        if x.cols() != spec.d_model || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "block input",
                lhs: (spec.seq_len, spec.d_model),
                rhs: x.shape(),
            });
        }
    }
    Ok(())
}

/// Runs the block over a batch of sequences. Sequences are processed in
/// parallel; each output depends only on its own input.
pub fn block_forward(
    spec: &BlockSpec,
    params: &BlockParams,
    xs: &[DenseMatrix],
) -> Result<(Vec<DenseMatrix>, Tape)> {
    params.validate(spec)?;
    check_inputs(spec, xs)?;
    let weights = params.effective_weights();
    let seqs: Vec<SeqTape> = xs
        .par_iter()
        .map(|x| forward_seq(spec, &weights, &params.norm_attn, &params.norm_mlp, x))
        .collect();
    let ys: Vec<DenseMatrix> = seqs.iter().map(|t| output(t, &weights)).collect();
    if let Some(i) = ys.iter().position(|y| !y.is_finite()) {
        return Err(Error::NonFinite(format!("block output for sequence {i}")));
    }
    let tape = Tape {
        spec: *spec,
        weights,
        norm_attn: params.norm_attn.clone(),
        norm_mlp: params.norm_mlp.clone(),
        seqs,
    };
    Ok((ys, tape))
}

/// Block outputs only.
pub fn block_apply(
    spec: &BlockSpec,
    params: &BlockParams,
    xs: &[DenseMatrix],
) -> Result<Vec<DenseMatrix>> {
    block_forward(spec, params, xs).map(|(ys, _)| ys)
}

struct SeqGrads {
    weights: Vec<DenseMatrix>,
    norm_attn: Vec<f64>,
    norm_mlp: Vec<f64>,
    input: DenseMatrix,
}

fn backward_seq(tape: &Tape, t: &SeqTape, dy: &DenseMatrix) -> SeqGrads {
    let spec = &tape.spec;
    let w = &tape.weights;
    let hd = spec.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dw: Vec<DenseMatrix> = w
        .iter()
        .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut dg1 = vec![0.0; spec.d_model];
    let mut dg2 = vec![0.0; spec.d_model];

    // MLP branch
    dw[Layer::Down.index()] = t.act.t_matmul(dy).expect("shapes");
    let dact = dy.matmul_t(&w[Layer::Down.index()]).expect("shapes");
    let dgate = DenseMatrix::from_fn(t.gate.rows(), t.gate.cols(), |i, j| {
        let g = t.gate[(i, j)];
        let s = sigmoid(g);
        dact[(i, j)] * t.up[(i, j)] * s * (1.0 + g * (1.0 - s))
    });
    let dup = DenseMatrix::from_fn(t.up.rows(), t.up.cols(), |i, j| {
        let g = t.gate[(i, j)];
        dact[(i, j)] * g * sigmoid(g)
    });
    dw[Layer::Gate.index()] = t.h2.t_matmul(&dgate).expect("shapes");
    dw[Layer::Up.index()] = t.h2.t_matmul(&dup).expect("shapes");
    let dh2 = &dgate.matmul_t(&w[Layer::Gate.index()]).expect("shapes")
        + &dup.matmul_t(&w[Layer::Up.index()]).expect("shapes");
    let dx1 = dy + &rms_norm_backward(&t.x1, &t.rms_mlp, &tape.norm_mlp, &dh2, &mut dg2);

    // attention branch
    dw[Layer::O.index()] = t.ctx.t_matmul(&dx1).expect("shapes");
    let dctx = dx1.matmul_t(&w[Layer::O.index()]).expect("shapes");
    let seq = t.x.rows();
    let mut dq = DenseMatrix::zeros(seq, spec.d_model);
    let mut dk = DenseMatrix::zeros(seq, spec.d_model);
    let mut dv = DenseMatrix::zeros(seq, spec.d_model);
    for head in 0..spec.n_heads {
        let cols = head * hd;
        let (qh, kh, vh) = (
            t.q.columns(cols, hd),
            t.k.columns(cols, hd),
            t.v.columns(cols, hd),
        );
        let p = &t.probs[head];
        let dch = dctx.columns(cols, hd);
        let dp = dch.matmul_t(&vh).expect("shapes");
        dv.set_columns(cols, &p.t_matmul(&dch).expect("shapes"));
        let mut ds = DenseMatrix::zeros(seq, seq);
        for i in 0..seq {
            let inner = crate::linalg::dot(p.row(i), dp.row(i));
            for j in 0..=i {
                ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - inner) * scale;
            }
        }
        dq.set_columns(cols, &(&ds * &kh));
        dk.set_columns(cols, &ds.t_matmul(&qh).expect("shapes"));
    }
    dw[Layer::Q.index()] = t.h.t_matmul(&dq).expect("shapes");
    dw[Layer::K.index()] = t.h.t_matmul(&dk).expect("shapes");
    dw[Layer::V.index()] = t.h.t_matmul(&dv).expect("shapes");
    let dh = &(&dq.matmul_t(&w[Layer::Q.index()]).expect("shapes")
        + &dk.matmul_t(&w[Layer::K.index()]).expect("shapes"))
        + &dv.matmul_t(&w[Layer::V.index()]).expect("shapes");
    let dx = &dx1 + &rms_norm_backward(&t.x, &t.rms_attn, &tape.norm_attn, &dh, &mut dg1);

    SeqGrads {
        weights: dw,
        norm_attn: dg1,
        norm_mlp: dg2,
        input: dx,
    }
}

/// Reverse-mode gradients given `∂loss/∂y` for every sequence of the
/// forward batch. Per-sequence contributions are summed in batch order.
pub fn block_backward(tape: &Tape, dys: &[DenseMatrix]) -> Result<BlockGrads> {
    if dys.len() != tape.seqs.len() {
        return Err(Error::ShapeMismatch {
            op: "block_backward batch",
            lhs: (tape.seqs.len(), 0),
            rhs: (dys.len(), 0),
        });
    }
    for (t, dy) in tape.seqs.iter().zip(dys) {
        if dy.shape() != t.x.shape() {
            return Err(Error::ShapeMismatch {
                op: "block_backward",
                lhs: t.x.shape(),
                rhs: dy.shape(),
            });
        }
    }
    let per_seq: Vec<SeqGrads> = tape
        .seqs
        .par_iter()
        .zip(dys)
        .map(|(t, dy)| backward_seq(tape, t, dy))
        .collect();
    let d = tape.spec.d_model;
    let mut grads = BlockGrads {
        weights: tape
            .weights
            .iter()
            .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
            .collect(),
        norm_attn: vec![0.0; d],
        norm_mlp: vec![0.0; d],
        input: Vec::with_capacity(dys.len()),
    };
    for g in per_seq {
        for (acc, w) in grads.weights.iter_mut().zip(&g.weights) {
            acc.axpy(1.0, w)?;
        }
        for (acc, v) in grads.norm_attn.iter_mut().zip(&g.norm_attn) {
            *acc += v;
        }
        for (acc, v) in grads.norm_mlp.iter_mut().zip(&g.norm_mlp) {
            *acc += v;
        }
        grads.input.push(g.input);
    }
    Ok(grads)
}

/// `Σ ‖y − y*‖²_F` over a batch.
pub fn output_error(ys: &[DenseMatrix], targets: &[DenseMatrix]) -> f64 {
    ys.iter()
        .zip(targets)
        .map(|(y, t)| (y - t).frobenius_norm_sq())
        .sum()
}
