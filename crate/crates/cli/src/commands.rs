use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use slr_core::linalg::numerical_rank;
use slr_core::rng::{stream_rng, Stream};
use slr_core::solver::{mean_gram, RANK_TOL};
use slr_core::synth::{
    benchmark_problem, correlated_activations, planted_weights, random_weights, toy_block,
    toy_calibration,
};
use slr_core::tensor_io::{read_matrix, write_matrix, IterRecord, RunReport, RunSummary};
use slr_core::tm::{
    cascade_with, dense_propagation, output_error, tm_refine, BlockParams, BlockSpec,
    DecomposedLayer, Layer, LayerWeights, TmOutcome,
};
use slr_core::{
    decompose, objective, DenseMatrix, LayerProblem, RunConfig, SparsityPattern, Support,
};

use crate::args::{solver_choice, SolveArgs, TmArgs};
use crate::blockio::{
    create_dir, io_error, read_block, read_stack, write_block, write_json, write_stack,
};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub n_in: usize,
    #[arg(long, default_value_t = 32)]
    pub n_out: usize,
    /// Number of calibration sequences.
    #[arg(long, default_value_t = 128)]
    pub calib_count: usize,
    /// Tokens per calibration sequence (layer mode).
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    /// Plant `Ŵ = S* + A*B*ᵀ + noise·E` instead of plain Gaussian weights.
    #[arg(long)]
    pub planted: bool,
    #[arg(long, default_value = "2:4")]
    pub sparsity: SparsityPattern,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Generate a stack of this many toy transformer blocks instead of a
    /// single layer.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
}

pub fn gen(args: &GenArgs) -> Result<(), CliError> {
    if args.calib_count == 0 {
        return Err(CliError::Usage("--calib-count must be positive".into()));
    }
    create_dir(&args.out)?;
    let mut rng = stream_rng(args.seed, Stream::Gen);
    let manifest = if let Some(count) = args.blocks {
        if count == 0 {
            return Err(CliError::Usage("--blocks must be positive".into()));
        }
        let spec = BlockSpec::new(args.d_model, args.heads, args.d_ff, args.seq_len)?;
        let names: Vec<String> = (0..count).map(|i| format!("block_{i}")).collect();
        for name in &names {
            write_block(&args.out.join(name), &spec, &toy_block(&spec, &mut rng))?;
        }
        let calib = toy_calibration(&spec, args.calib_count, &mut rng);
        write_stack(&args.out.join("calib.slrt"), &calib)?;
        json!({
            "kind": "blocks",
            "seed": args.seed,
            "block": spec,
            "blocks": names,
            "calib": "calib.slrt",
            "calib_shape": [args.calib_count, spec.seq_len, spec.d_model],
        })
    } else {
        if args.tokens == 0 {
            return Err(CliError::Usage("--tokens must be positive".into()));
        }
        let planted = if args.planted {
            args.sparsity.validate_for(args.n_in, args.n_out)?;
            if args.rank > args.n_in.min(args.n_out) {
                return Err(CliError::Usage(format!(
                    "--rank {} exceeds the layer shape",
                    args.rank
                )));
            }
            let (w, s, l) = planted_weights(
                args.n_in,
                args.n_out,
                args.sparsity,
                args.rank,
                args.noise,
                &mut rng,
            )?;
            write_matrix(args.out.join("s_star.slrt"), &s)?;
            write_matrix(args.out.join("l_star.slrt"), &l)?;
            Some(w)
        } else {
            None
        };
        let w = match planted {
            Some(w) => w,
            None => random_weights(args.n_in, args.n_out, &mut rng),
        };
        write_matrix(args.out.join("weights.slrt"), &w)?;
        let calib = correlated_activations(args.calib_count, args.tokens, args.n_in, &mut rng);
        write_stack(&args.out.join("calib.slrt"), &calib)?;
        json!({
            "kind": "layer",
            "seed": args.seed,
            "weights": "weights.slrt",
            "shape": [args.n_in, args.n_out],
            "calib": "calib.slrt",
            "calib_shape": [args.calib_count, args.tokens, args.n_in],
            "planted": args.planted.then(|| json!({
                "sparsity": args.sparsity.to_string(),
                "rank": args.rank,
                "noise": args.noise,
                "sparse": "s_star.slrt",
                "low_rank": "l_star.slrt",
            })),
        })
    };
    write_json(&args.out.join("manifest.json"), &manifest)
}

fn layer_problem(weights: &Path, calib: &Path, cfg: &RunConfig) -> Result<LayerProblem, CliError> {
    let w = read_matrix(weights)?;
    let xs = read_stack(calib)?;
    let (rows, cols) = w.shape();
    cfg.validate_for_shape(rows, cols)?;
    Ok(LayerProblem::new(
        w,
        mean_gram(&xs)?,
        cfg.lambda,
        cfg.sparsity,
        cfg.rank,
    )?)
}

fn finish_report(report: &mut RunReport, timing: bool) {
    if !timing {
        report.strip_timing();
    }
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Weights `Ŵ` (`n_in × n_out` SLRT).
    #[arg(long)]
    pub weights: PathBuf,
    /// Calibration activations (`count × tokens × n_in` SLRT).
    #[arg(long)]
    pub calib: PathBuf,
    /// Output directory for `s.slrt`, `a.slrt`, `b.slrt` and `report.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Keep wall-clock timings in the report.
    #[arg(long)]
    pub timing: bool,
}

pub fn decompose_cmd(args: &DecomposeArgs) -> Result<(), CliError> {
    let cfg = args.solve.run_config()?;
    let problem = layer_problem(&args.weights, &args.calib, &cfg)?;
    let mut dec = decompose(&problem, &cfg)?;
    let layer = DecomposedLayer::from_parts(&dec.sparse, &dec.low_rank, cfg.rank)?;
    create_dir(&args.out)?;
    write_matrix(args.out.join("s.slrt"), &layer.s)?;
    write_matrix(args.out.join("a.slrt"), &layer.a)?;
    write_matrix(args.out.join("b.slrt"), &layer.b)?;
    finish_report(&mut dec.report, args.timing);
    dec.report.write(args.out.join("report.jsonl"))?;
    println!(
        "{}",
        serde_json::to_string(&dec.report.summary).expect("summary serializes")
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub s: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Pattern `S` is checked against for `nm_valid`.
    #[arg(long, default_value = "2:4")]
    pub sparsity: SparsityPattern,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let w = read_matrix(&args.weights)?;
    let s = read_matrix(&args.s)?;
    let l = read_matrix(&args.a)?.matmul_t(&read_matrix(&args.b)?)?;
    let metrics = evaluate_metrics(
        &w,
        &read_stack(&args.calib)?,
        &s,
        &l,
        args.lambda,
        args.sparsity,
    )?;
    println!("{metrics}");
    Ok(())
}

/// `{objective, rel_output_err, sparsity, rank, nm_valid}` for `S + L`
/// against `Ŵ` on calibration inputs `xs`.
pub fn evaluate_metrics(
    w: &DenseMatrix,
    xs: &[DenseMatrix],
    s: &DenseMatrix,
    l: &DenseMatrix,
    lambda: f64,
    pattern: SparsityPattern,
) -> Result<serde_json::Value, CliError> {
    for (op, m) in [("sparse part", s), ("low-rank part", l)] {
        if m.shape() != w.shape() {
            return Err(CliError::Core(slr_core::Error::ShapeMismatch {
                op,
                lhs: w.shape(),
                rhs: m.shape(),
            }));
        }
    }
    let gram = mean_gram(xs)?;
    let problem = LayerProblem::new(w.clone(), gram.clone(), lambda, pattern, 0)?;
    let obj = objective(&problem, s, l);
    let e = w - &(s + l);
    let err = e.t_matmul(&gram.matmul(&e)?)?.trace();
    let base = w.t_matmul(&gram.matmul(w)?)?.trace();
    let rel_output_err = if base > 0.0 {
        (err.max(0.0) / base).sqrt()
    } else {
        0.0
    };
    let support = Support::of_nonzeros(s);
    Ok(json!({
        "objective": obj,
        "rel_output_err": rel_output_err,
        "sparsity": 1.0 - support.popcount() as f64 / s.len() as f64,
        "rank": numerical_rank(l, RANK_TOL)?,
        "nm_valid": pattern.admits(&support),
    }))
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Directory of the dense block.
    #[arg(long)]
    pub dense: PathBuf,
    /// Directory of its layer-wise decomposition.
    #[arg(long)]
    pub compressed: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Output directory for the refined block and `report.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration whose `[tm]` section gives the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub tm: TmArgs,
}

pub fn refine_tm(args: &RefineArgs) -> Result<(), CliError> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?.tm,
        None => None,
    };
    let hyper = args.tm.apply(base)?;
    let (spec, dense) = read_block(&args.dense)?;
    let (cspec, compressed) = read_block(&args.compressed)?;
    if cspec != spec {
        return Err(CliError::Usage(
            "dense and compressed blocks have different dimensions".into(),
        ));
    }
    let xs = read_stack(&args.calib)?;
    check_calibration(&spec, &xs)?;
    let outcome = tm_refine(&spec, &dense, &compressed, &xs, &hyper, args.seed)?;
    write_block(&args.out, &spec, &outcome.params)?;
    let report = tm_report(&outcome)?;
    report.write(args.out.join("report.jsonl"))?;
    println!(
        "{}",
        serde_json::to_string(&report.summary).expect("summary serializes")
    );
    Ok(())
}

fn check_calibration(spec: &BlockSpec, xs: &[DenseMatrix]) -> Result<(), CliError> {
    match xs.first() {
        None => Err(CliError::Usage("empty calibration stack".into())),
        Some(x) if x.cols() != spec.d_model => {
            Err(CliError::Core(slr_core::Error::ShapeMismatch {
                op: "calibration width",
                lhs: (x.rows(), spec.d_model),
                rhs: x.shape(),
            }))
        }
        Some(_) => Ok(()),
    }
}

/// Rank, density and mask validity over all decomposed layers of a block.
fn block_stats(params: &BlockParams) -> Result<(usize, f64, bool), CliError> {
    let mut rank = 0;
    let (mut kept, mut total) = (0usize, 0usize);
    let mut valid = true;
    for lw in &params.layers {
        if let LayerWeights::Decomposed(d) = lw {
            rank = rank.max(numerical_rank(&d.low_rank(), RANK_TOL)?);
            let support = Support::of_nonzeros(&d.s);
            kept += support.popcount();
            total += d.s.len();
            valid &= support.is_subset_of(&d.mask);
        }
    }
    let density = if total > 0 {
        kept as f64 / total as f64
    } else {
        1.0
    };
    Ok((rank, density, valid))
}

fn tm_report(outcome: &TmOutcome) -> Result<RunReport, CliError> {
    let mut records = vec![IterRecord::objective_only(0, outcome.initial_error)];
    records.extend(
        outcome
            .epoch_errors
            .iter()
            .enumerate()
            .map(|(i, &e)| IterRecord::objective_only(i + 1, e)),
    );
    let (rank, density, valid) = block_stats(&outcome.params)?;
    Ok(RunReport {
        records,
        summary: RunSummary {
            method: "tm".into(),
            objective: outcome.final_error(),
            surrogate_objective: None,
            rank,
            density,
            pattern: "frozen-mask".into(),
            pattern_valid: valid,
            iterations: outcome.epoch_errors.len(),
            converged: true,
            workers: None,
            notes: vec![
                format!("best epoch {}", outcome.best_epoch),
                format!("adam steps {}", outcome.steps),
            ],
        },
    })
}

#[derive(Debug, Args)]
pub struct CascadeArgs {
    /// Block directories in stack order.
    #[arg(long, num_args = 1.., required = true)]
    pub blocks: Vec<PathBuf>,
    /// Calibration inputs of the first block.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Threads solving the seven layers of a block.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Refine every block with TM after its layer-wise decomposition.
    #[arg(long)]
    pub tm: bool,
    #[command(flatten)]
    pub solve: SolveArgs,
    #[command(flatten)]
    pub tm_args: TmArgs,
    #[arg(long)]
    pub timing: bool,
}

pub fn cascade(args: &CascadeArgs) -> Result<(), CliError> {
    let mut cfg = args.solve.run_config()?;
    let use_tm = args.tm || cfg.tm.is_some() || args.tm_args.any();
    if use_tm {
        cfg.tm = Some(args.tm_args.apply(cfg.tm)?);
    }
    if args.workers == 0 {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    let mut spec = None;
    let mut blocks = Vec::with_capacity(args.blocks.len());
    for dir in &args.blocks {
        let (s, params) = read_block(dir)?;
        if spec.is_some_and(|prev| prev != s) {
            return Err(CliError::Usage(format!(
                "{} has different block dimensions",
                dir.display()
            )));
        }
        spec = Some(s);
        blocks.push(params);
    }
    let spec = spec.expect("at least one block");
    let xs = read_stack(&args.calib)?;
    check_calibration(&spec, &xs)?;

    let out = cascade_with(&spec, &blocks, &xs, &cfg, args.workers, |_| use_tm)?;
    let dense = dense_propagation(&spec, &blocks, &xs)?;
    create_dir(&args.out)?;
    let mut records = Vec::with_capacity(out.blocks.len());
    for (i, block) in out.blocks.iter().enumerate() {
        let dir = args.out.join(format!("block_{i}"));
        write_block(&dir, &spec, &block.params)?;
        let reports = dir.join("reports");
        create_dir(&reports)?;
        for (layer, report) in Layer::ALL.iter().zip(&block.reports) {
            let mut report = report.clone();
            finish_report(&mut report, args.timing);
            report.write(reports.join(format!("{}.jsonl", layer.name())))?;
        }
        if let Some(tm) = &block.tm {
            tm_report(tm)?.write(dir.join("tm.jsonl"))?;
        }
        records.push(IterRecord::objective_only(
            i + 1,
            output_error(&out.activations[i + 1], &dense[i + 1]),
        ));
    }
    write_stack(
        &args.out.join("activations.slrt"),
        out.activations.last().expect("nonempty"),
    )?;

    let mut rank = 0;
    let (mut density, mut valid) = (0.0, true);
    for block in &out.blocks {
        let (r, d, v) = block_stats(&block.params)?;
        rank = rank.max(r);
        density += d / out.blocks.len() as f64;
        valid &= v && block.reports.iter().all(|r| r.summary.pattern_valid);
    }
    let report = RunReport {
        summary: RunSummary {
            method: format!("cascade/{}", cfg.solver.label()),
            objective: records.last().map_or(0.0, |r| r.objective),
            surrogate_objective: None,
            rank,
            density,
            pattern: cfg.sparsity.to_string(),
            pattern_valid: valid,
            iterations: out.blocks.len(),
            converged: true,
            workers: Some(args.workers),
            notes: vec![format!("tm {}", if use_tm { "on" } else { "off" })],
        },
        records,
    };
    report.write(args.out.join("report.jsonl"))?;
    println!(
        "{}",
        serde_json::to_string(&report.summary).expect("summary serializes")
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Weights; without them a synthetic `n × n` benchmark layer is built
    /// from `--seed`.
    #[arg(long, requires = "calib")]
    pub weights: Option<PathBuf>,
    #[arg(long, requires = "weights")]
    pub calib: Option<PathBuf>,
    /// Size of the synthetic layer.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "3basil,altmin,oats,eora")]
    pub methods: Vec<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub solve: SolveArgs,
}

/// CSV of `method,iter,objective`, one row per recorded iteration.
pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let cfg = args.solve.run_config()?;
    let problem = match (&args.weights, &args.calib) {
        (Some(w), Some(c)) => layer_problem(w, c, &cfg)?,
        _ => {
            cfg.validate_for_shape(args.n, args.n)?;
            benchmark_problem(cfg.seed, args.n, cfg.sparsity, cfg.rank, cfg.lambda)?
        }
    };
    let mut csv = String::from("method,iter,objective\n");
    for method in &args.methods {
        let mut run = cfg.clone();
        run.solver = solver_choice(Some(method.as_str()), args.solve.steps, cfg.solver)?;
        let dec = decompose(&problem, &run)?;
        for rec in &dec.report.records {
            writeln!(
                csv,
                "{},{},{}",
                dec.report.summary.method, rec.iter, rec.objective
            )
            .expect("string write");
        }
    }
    match &args.out {
        Some(path) => fs::write(path, csv).map_err(|e| io_error(path, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
