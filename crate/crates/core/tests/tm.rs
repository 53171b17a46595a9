use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use slr_core::rng::{stream_rng, Stream};
use slr_core::synth::{toy_block, toy_calibration};
use slr_core::tm::{
    block_apply, block_backward, block_forward, compress_block, cosine_lr, dense_propagation,
    output_error, tm_refine, Adam, BlockParams, BlockSpec, Layer, LayerWeights, TmHyper,
};
use slr_core::{DenseMatrix, RunConfig, SparsityPattern};

fn to_na(a: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)])
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn rms_norm(x: &DMatrix<f64>, g: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / g.len() as f64 + 1e-6).sqrt();
        for (v, s) in row.iter_mut().zip(g) {
            *v = *v / rms * s;
        }
    }
    out
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Pre-norm block written out directly with nalgebra.
fn oracle_forward(spec: &BlockSpec, params: &BlockParams, x: &DenseMatrix) -> DMatrix<f64> {
    let w: Vec<DMatrix<f64>> = params
        .layers
        .iter()
        .map(|l| to_na(&l.effective()))
        .collect();
    let x = to_na(x);
    let h = rms_norm(&x, &params.norm_attn);
    let q = &h * &w[Layer::Q.index()];
    let k = &h * &w[Layer::K.index()];
    let v = &h * &w[Layer::V.index()];
    let (t, hd) = (spec.seq_len, spec.head_dim());
    let mut ctx = DMatrix::zeros(t, spec.d_model);
    for head in 0..spec.n_heads {
        let cols = head * hd..(head + 1) * hd;
        let qh = q.columns(cols.start, hd);
        let kh = k.columns(cols.start, hd);
        let vh = v.columns(cols.start, hd);
        let mut scores = qh * kh.transpose() / (hd as f64).sqrt();
        for i in 0..t {
            let max = (0..=i)
                .map(|j| scores[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..t {
                scores[(i, j)] = if j <= i {
                    (scores[(i, j)] - max).exp()
                } else {
                    0.0
                };
                total += scores[(i, j)];
            }
            for j in 0..t {
                scores[(i, j)] /= total;
            }
        }
        ctx.columns_mut(cols.start, hd).copy_from(&(scores * vh));
    }
    let x1 = &x + ctx * &w[Layer::O.index()];
    let h2 = rms_norm(&x1, &params.norm_mlp);
    let gate = (&h2 * &w[Layer::Gate.index()]).map(silu);
    let up = &h2 * &w[Layer::Up.index()];
    x1 + gate.component_mul(&up) * &w[Layer::Down.index()]
}

fn small_spec() -> BlockSpec {
    BlockSpec::new(8, 2, 12, 4).unwrap()
}

fn random_block(spec: &BlockSpec, seed: u64) -> BlockParams {
    let mut rng = stream_rng(seed, Stream::Test);
    let mut params = BlockParams::random(spec, 0.4, &mut rng);
    for g in params
        .norm_attn
        .iter_mut()
        .chain(params.norm_mlp.iter_mut())
    {
        let z: f64 = StandardNormal.sample(&mut rng);
        *g = 1.0 + 0.2 * z;
    }
    params
}

#[test]
fn forward_matches_clean_room_oracle() {
    let spec = small_spec();
    let params = random_block(&spec, 1);
    let mut rng = stream_rng(2, Stream::Test);
    let xs: Vec<DenseMatrix> = (0..3).map(|_| gaussian(4, 8, &mut rng)).collect();
    let ys = block_apply(&spec, &params, &xs).unwrap();
    for (x, y) in xs.iter().zip(&ys) {
        let want = oracle_forward(&spec, &params, x);
        let err = (to_na(y) - want).abs().max();
        assert!(err < 1e-12, "forward mismatch {err}");
    }
}

#[test]
fn causal_outputs_ignore_future_tokens() {
    let spec = small_spec();
    let params = random_block(&spec, 3);
    let mut rng = stream_rng(4, Stream::Test);
    let x = gaussian(4, 8, &mut rng);
    let mut x2 = x.clone();
    for j in 0..8 {
        x2[(3, j)] += 1.0;
    }
    let y = block_apply(&spec, &params, &[x, x2]).unwrap();
    for i in 0..3 {
        for j in 0..8 {
            assert_eq!(y[0][(i, j)], y[1][(i, j)]);
        }
    }
}

fn zero_layers(params: &mut BlockParams, layers: &[Layer]) {
    for &l in layers {
        let (r, c) = params.layers[l.index()].shape();
        params.layers[l.index()] = LayerWeights::Dense(DenseMatrix::zeros(r, c));
    }
}

/// Checks analytic gradients of `Σ ⟨C, y⟩` against central differences
/// for the listed layers, both norm scales and the input.
fn check_gradients(params: &BlockParams, layers: &[Layer], seed: u64) {
    let spec = small_spec();
    let mut rng = stream_rng(seed, Stream::Test);
    let xs: Vec<DenseMatrix> = (0..2).map(|_| gaussian(4, 8, &mut rng)).collect();
    let cs: Vec<DenseMatrix> = (0..2).map(|_| gaussian(4, 8, &mut rng)).collect();
    let loss = |p: &BlockParams, xs: &[DenseMatrix]| -> f64 {
        block_apply(&spec, p, xs)
            .unwrap()
            .iter()
            .zip(&cs)
            .map(|(y, c)| y.hadamard(c).unwrap().as_slice().iter().sum::<f64>())
            .sum()
    };
    let (_, tape) = block_forward(&spec, params, &xs).unwrap();
    let grads = block_backward(&tape, &cs).unwrap();
    let h = 1e-6;
    let close = |analytic: f64, numeric: f64, what: &str| {
        assert!(
            (analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
            "{what}: analytic {analytic} numeric {numeric}"
        );
    };

    for &layer in layers {
        let w = params.layers[layer.index()].effective();
        for idx in (0..w.len()).step_by(5) {
            let bump = |delta: f64| {
                let mut p = params.clone();
                let mut m = w.clone();
                m.as_mut_slice()[idx] += delta;
                p.layers[layer.index()] = LayerWeights::Dense(m);
                loss(&p, &xs)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            close(
                grads.weights[layer.index()].as_slice()[idx],
                numeric,
                layer.name(),
            );
        }
    }
    for i in 0..8 {
        let bump = |delta: f64, attn: bool| {
            let mut p = params.clone();
            if attn {
                p.norm_attn[i] += delta;
            } else {
                p.norm_mlp[i] += delta;
            }
            loss(&p, &xs)
        };
        close(
            grads.norm_attn[i],
            (bump(h, true) - bump(-h, true)) / (2.0 * h),
            "norm_attn",
        );
        close(
            grads.norm_mlp[i],
            (bump(h, false) - bump(-h, false)) / (2.0 * h),
            "norm_mlp",
        );
    }
    for s in 0..2 {
        for idx in (0..32).step_by(3) {
            let bump = |delta: f64| {
                let mut moved = xs.clone();
                moved[s].as_mut_slice()[idx] += delta;
                loss(params, &moved)
            };
            close(
                grads.input[s].as_slice()[idx],
                (bump(h) - bump(-h)) / (2.0 * h),
                "input",
            );
        }
    }
}

#[test]
fn attention_path_gradients() {
    let mut params = random_block(&small_spec(), 5);
    zero_layers(&mut params, &[Layer::Gate, Layer::Up, Layer::Down]);
    check_gradients(&params, &[Layer::Q, Layer::K, Layer::V, Layer::O], 6);
}

#[test]
fn mlp_path_gradients() {
    let mut params = random_block(&small_spec(), 7);
    zero_layers(&mut params, &[Layer::Q, Layer::K, Layer::V, Layer::O]);
    check_gradients(&params, &[Layer::Gate, Layer::Up, Layer::Down], 8);
}

#[test]
fn adam_step_matches_formula() {
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
    let mut adam = Adam::new(b1, b2, eps);
    let slot = adam.add_slot(1);
    let mut p = [1.0];
    let (mut m, mut v, mut want) = (0.0, 0.0, 1.0);
    for (t, g) in [0.5, -0.2, 0.3].into_iter().enumerate() {
        adam.begin_step();
        adam.update(slot, &mut p, &[g], lr);
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - f64::powi(b1, t));
        let v_hat = v / (1.0 - f64::powi(b2, t));
        want -= lr * m_hat / (v_hat.sqrt() + eps);
        assert!((p[0] - want).abs() < 1e-15);
    }
    // The first bias-corrected step moves by almost exactly lr.
    let mut fresh = Adam::new(b1, b2, eps);
    let s = fresh.add_slot(1);
    let mut q = [0.0];
    fresh.begin_step();
    fresh.update(s, &mut q, &[3.7], lr);
    assert!((q[0] + lr).abs() < 1e-9);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1.0, 0.1, 0, 10), 1.0);
    assert!((cosine_lr(1.0, 0.1, 10, 10) - 0.1).abs() < 1e-15);
    assert!((cosine_lr(1.0, 0.1, 5, 10) - 0.55).abs() < 1e-15);
}

struct Toy {
    spec: BlockSpec,
    dense: BlockParams,
    compressed: BlockParams,
    calib: Vec<DenseMatrix>,
}

fn toy(seed: u64, rank: usize) -> Toy {
    let spec = BlockSpec::new(16, 2, 32, 8).unwrap();
    let mut rng = stream_rng(seed, Stream::Gen);
    let dense = toy_block(&spec, &mut rng);
    let calib = toy_calibration(&spec, 16, &mut rng);
    let mut config = RunConfig::new(SparsityPattern::nm(2, 4), rank);
    config.max_iters = 60;
    let compressed = compress_block(&spec, &dense, &calib, &config, 1)
        .unwrap()
        .params;
    Toy {
        spec,
        dense,
        compressed,
        calib,
    }
}

fn hyper(lr: f64) -> TmHyper {
    TmHyper {
        epochs: 6,
        batch: 4,
        lr,
        eta_min: lr / 5.0,
        ..TmHyper::default()
    }
}

#[test]
fn refinement_keeps_masks_and_ranks() {
    let t = toy(11, 2);
    let out = tm_refine(&t.spec, &t.dense, &t.compressed, &t.calib, &hyper(1e-3), 3).unwrap();
    for (before, after) in t.compressed.layers.iter().zip(&out.params.layers) {
        let (LayerWeights::Decomposed(b), LayerWeights::Decomposed(a)) = (before, after) else {
            panic!("all projections are decomposed");
        };
        assert_eq!(a.mask, b.mask);
        assert!(a
            .s
            .as_slice()
            .iter()
            .zip(a.mask.mask())
            .all(|(v, keep)| *keep || *v == 0.0));
        assert_eq!(a.a.shape(), b.a.shape());
        assert_eq!(a.b.shape(), b.b.shape());
    }
    assert_eq!(out.params.norm_attn, t.compressed.norm_attn);
    assert!(out.final_error() <= out.initial_error);
    let dense_out = block_apply(&t.spec, &t.dense, &t.calib).unwrap();
    let refined = output_error(
        &block_apply(&t.spec, &out.params, &t.calib).unwrap(),
        &dense_out,
    );
    assert!((refined - out.final_error()).abs() <= 1e-9 * refined.max(1e-300));
}

#[test]
fn refinement_is_deterministic() {
    let t = toy(12, 2);
    let a = tm_refine(&t.spec, &t.dense, &t.compressed, &t.calib, &hyper(1e-3), 9).unwrap();
    let b = tm_refine(&t.spec, &t.dense, &t.compressed, &t.calib, &hyper(1e-3), 9).unwrap();
    assert_eq!(a.epoch_errors, b.epoch_errors);
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn sparse_only_refinement_descends_with_small_steps() {
    let t = toy(13, 0);
    let out = tm_refine(&t.spec, &t.dense, &t.compressed, &t.calib, &hyper(2e-5), 1).unwrap();
    let mut trace = vec![out.initial_error];
    trace.extend(&out.epoch_errors);
    for w in trace.windows(2) {
        assert!(w[1] <= w[0], "error rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn compressed_propagation_differs_from_dense() {
    let t = toy(14, 1);
    let dense_acts = dense_propagation(&t.spec, std::slice::from_ref(&t.dense), &t.calib).unwrap();
    let compressed_out = block_apply(&t.spec, &t.compressed, &t.calib).unwrap();
    let gap = output_error(&compressed_out, &dense_acts[1]);
    assert!(gap > 0.0);
    assert_eq!(dense_acts.len(), 2);
    assert_eq!(dense_acts[0], t.calib);
}
