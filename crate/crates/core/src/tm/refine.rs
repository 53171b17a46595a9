use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{cosine_lr, Adam};
use super::block::{
    block_apply, block_backward, block_forward, output_error, BlockParams, BlockSpec, LayerWeights,
};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::{stream_rng, Stream};
use crate::sparsity::apply_support;

/// Refinement schedule and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Also train the two RMSNorm scale vectors.
    pub train_norms: bool,
}

impl Default for TmHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            lr: 2e-5,
            eta_min: 4e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_norms: false,
        }
    }
}

impl TmHyper {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &'static str, message: String| Err(Error::InvalidConfig { field, message });
        if self.epochs == 0 {
            return bad("tm.epochs", "must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("tm.batch", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("tm.lr", format!("{} must be positive", self.lr));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.lr) {
            return bad(
                "tm.eta_min",
                format!("{} must lie in (0, lr]", self.eta_min),
            );
        }
        for (field, b) in [("tm.beta1", self.beta1), ("tm.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return bad(field, format!("{b} must lie in (0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("tm.eps", format!("{} must be positive", self.eps));
        }
        Ok(())
    }

    /// Adam steps for `count` calibration sequences.
    pub fn total_steps(&self, count: usize) -> usize {
        self.epochs * count.div_ceil(self.batch)
    }
}

#[derive(Debug, Clone)]
pub struct TmOutcome {
    pub params: BlockParams,
    /// Block error `Σ‖T(X; W) − T(X; S + ABᵀ)‖²_F` before refinement.
    pub initial_error: f64,
    /// Block error after each epoch.
    pub epoch_errors: Vec<f64>,
    /// Epoch whose parameters were returned; 0 means the input itself.
    pub best_epoch: usize,
    pub steps: usize,
}

impl TmOutcome {
    pub fn final_error(&self) -> f64 {
        if self.best_epoch == 0 {
            self.initial_error
        } else {
            self.epoch_errors[self.best_epoch - 1]
        }
    }
}

/// Refines every decomposed layer of `compressed` so the block reproduces
/// the outputs of `dense` on `x_cal`. Masks and ranks stay fixed; dense
/// layers and (unless `train_norms`) norm scales are frozen.
///
/// The full-calibration error is measured after every epoch and the best
/// parameters seen (including the starting point) are returned. An epoch
/// error above ten times the starting error aborts with
/// [`Error::Divergence`].
pub fn tm_refine(
    spec: &BlockSpec,
    dense: &BlockParams,
    compressed: &BlockParams,
    x_cal: &[DenseMatrix],
    hyper: &TmHyper,
    seed: u64,
) -> Result<TmOutcome> {
    hyper.validate()?;
    if x_cal.is_empty() {
        return Err(Error::InvalidConfig {
            field: "calibration",
            message: "no calibration sequences".into(),
        });
    }
    let targets = block_apply(spec, dense, x_cal)?;
    let mut params = compressed.clone();
    let initial_error = output_error(&block_apply(spec, &params, x_cal)?, &targets);

    let mut adam = Adam::new(hyper.beta1, hyper.beta2, hyper.eps);
    // Three slots (S, A, B) per decomposed layer, then the two norm vectors.
    let mut slots = Vec::new();
    for lw in &params.layers {
        slots.push(match lw {
            LayerWeights::Decomposed(d) => Some([
                adam.add_slot(d.s.len()),
                adam.add_slot(d.a.len()),
                adam.add_slot(d.b.len()),
            ]),
            LayerWeights::Dense(_) => None,
        });
    }
    let norm_slots = [adam.add_slot(spec.d_model), adam.add_slot(spec.d_model)];

    let total = hyper.total_steps(x_cal.len());
    let mut rng = stream_rng(seed, Stream::TmBatch);
    let mut order: Vec<usize> = (0..x_cal.len()).collect();
    let mut best = (initial_error, params.clone(), 0usize);
    let mut epoch_errors = Vec::with_capacity(hyper.epochs);
    let mut step = 0usize;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            let xs: Vec<DenseMatrix> = chunk.iter().map(|&i| x_cal[i].clone()).collect();
            let (ys, tape) = block_forward(spec, &params, &xs)?;
            let numel: usize = ys.iter().map(DenseMatrix::len).sum();
            let scale = 2.0 / numel as f64;
            let dys: Vec<DenseMatrix> = ys
                .iter()
                .zip(chunk)
                .map(|(y, &i)| (y - &targets[i]).scale(scale))
                .collect();
            let grads = block_backward(&tape, &dys)?;
            let lr = cosine_lr(hyper.lr, hyper.eta_min, step, total);
            adam.begin_step();
            for (idx, lw) in params.layers.iter_mut().enumerate() {
                let (LayerWeights::Decomposed(d), Some([ss, sa, sb])) = (lw, slots[idx]) else {
                    continue;
                };
                let (ds, da, db) = d.split_gradient(&grads.weights[idx]);
                adam.update(ss, d.s.as_mut_slice(), ds.as_slice(), lr);
                adam.update(sa, d.a.as_mut_slice(), da.as_slice(), lr);
                adam.update(sb, d.b.as_mut_slice(), db.as_slice(), lr);
                d.s = apply_support(&d.s, &d.mask)?;
            }
            if hyper.train_norms {
                adam.update(norm_slots[0], &mut params.norm_attn, &grads.norm_attn, lr);
                adam.update(norm_slots[1], &mut params.norm_mlp, &grads.norm_mlp, lr);
            }
            step += 1;
        }
        let err = output_error(&block_apply(spec, &params, x_cal)?, &targets);
        if !err.is_finite() || (initial_error > 0.0 && err > 10.0 * initial_error) {
            return Err(Error::Divergence {
                loss: err,
                initial: initial_error,
            });
        }
        epoch_errors.push(err);
        if err < best.0 {
            best = (err, params.clone(), epoch);
        }
    }

    Ok(TmOutcome {
        params: best.1,
        initial_error,
        epoch_errors,
        best_epoch: best.2,
        steps: step,
    })
}
