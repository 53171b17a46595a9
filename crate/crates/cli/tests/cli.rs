use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slr_core::rng::{stream_rng, Stream};
use slr_core::solver::mean_gram;
use slr_core::sparsity::project;
use slr_core::tensor_io::{read_matrix, read_tensor, write_matrix, RunReport};
use slr_core::{decompose, objective, DenseMatrix, LayerProblem, RunConfig, SparsityPattern};
use tempfile::TempDir;

fn slr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slr"))
        .args(args)
        .output()
        .expect("spawn slr")
}

fn ok(args: &[&str]) -> String {
    let out = slr(args);
    assert!(
        out.status.success(),
        "slr {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Layer {
    _dir: TempDir,
    root: PathBuf,
}

impl Layer {
    fn gen(extra: &[&str]) -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let out = root.join("gen");
        let mut args = vec![
            "gen",
            "--out",
            s(&out),
            "--n-in",
            "16",
            "--n-out",
            "16",
            "--calib-count",
            "8",
        ];
        args.extend_from_slice(extra);
        ok(&args);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn weights(&self) -> PathBuf {
        self.path("gen/weights.slrt")
    }

    fn calib(&self) -> PathBuf {
        self.path("gen/calib.slrt")
    }

    fn decompose(&self, out: &str, extra: &[&str]) -> serde_json::Value {
        let (w, x, o) = (self.weights(), self.calib(), self.path(out));
        let mut args = vec![
            "decompose",
            "--weights",
            s(&w),
            "--calib",
            s(&x),
            "--out",
            s(&o),
            "--sparsity",
            "2:4",
            "--rank",
            "2",
        ];
        args.extend_from_slice(extra);
        json(&ok(&args))
    }

    fn evaluate(&self, sp: &Path, a: &Path, b: &Path) -> serde_json::Value {
        let (w, x) = (self.weights(), self.calib());
        json(&ok(&[
            "evaluate",
            "--weights",
            s(&w),
            "--calib",
            s(&x),
            "--s",
            s(sp),
            "--a",
            s(a),
            "--b",
            s(b),
        ]))
    }
}

#[test]
fn gen_writes_calibration_stack_and_manifest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    ok(&[
        "gen",
        "--out",
        s(&out),
        "--n-in",
        "12",
        "--n-out",
        "8",
        "--calib-count",
        "128",
        "--tokens",
        "10",
    ]);
    let calib = read_tensor(out.join("calib.slrt")).unwrap();
    assert_eq!(calib.shape(), &[128, 10, 12]);
    assert_eq!(
        read_matrix(out.join("weights.slrt")).unwrap().shape(),
        (12, 8)
    );
    let manifest = json(&fs::read_to_string(out.join("manifest.json")).unwrap());
    assert_eq!(manifest["calib_shape"], serde_json::json!([128, 10, 12]));
    assert!(manifest["planted"].is_null());
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    for name in ["a", "b"] {
        ok(&[
            "gen",
            "--out",
            s(&dir.path().join(name)),
            "--seed",
            "5",
            "--planted",
            "--calib-count",
            "4",
        ]);
    }
    ok(&[
        "gen",
        "--out",
        s(&dir.path().join("c")),
        "--seed",
        "6",
        "--planted",
        "--calib-count",
        "4",
    ]);
    for file in [
        "weights.slrt",
        "calib.slrt",
        "s_star.slrt",
        "l_star.slrt",
        "manifest.json",
    ] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    assert_ne!(
        fs::read(dir.path().join("a/weights.slrt")).unwrap(),
        fs::read(dir.path().join("c/weights.slrt")).unwrap()
    );
}

#[test]
fn planted_layer_is_recovered() {
    let layer = Layer::gen(&["--planted", "--rank", "2", "--seed", "3"]);
    let summary = layer.decompose("d", &[]);
    assert_eq!(summary["pattern_valid"], true);
    let m = layer.evaluate(
        &layer.path("d/s.slrt"),
        &layer.path("d/a.slrt"),
        &layer.path("d/b.slrt"),
    );
    assert!(m["rel_output_err"].as_f64().unwrap() < 1e-3, "{m}");
    assert_eq!(m["nm_valid"], true);
    assert_eq!(m["rank"], 2);
}

#[test]
fn decompose_report_ends_below_its_start() {
    let layer = Layer::gen(&[]);
    layer.decompose("d", &[]);
    let report = RunReport::read(layer.path("d/report.jsonl")).unwrap();
    assert!(report.records.iter().all(|r| r.wall_ms.is_none()));
    let w = read_matrix(layer.weights()).unwrap();
    let gram = mean_gram(&read_tensor(layer.calib()).unwrap().to_stack().unwrap()).unwrap();
    let problem = LayerProblem::new(w.clone(), gram, 0.0, SparsityPattern::nm(2, 4), 2).unwrap();
    let cfg = RunConfig::new(problem.pattern, 2);
    let start = decompose(
        &problem,
        &RunConfig {
            max_iters: 0,
            ..cfg
        },
    )
    .unwrap();
    assert!(report.summary.objective <= start.objective());
    assert_eq!(report.summary.iterations, 200);
}

#[test]
fn timing_flag_keeps_wall_clock() {
    let layer = Layer::gen(&[]);
    layer.decompose("d", &["--timing", "--max-iters", "5"]);
    let report = RunReport::read(layer.path("d/report.jsonl")).unwrap();
    assert!(report.records.iter().all(|r| r.wall_ms.is_some()));
}

#[test]
fn eora_records_one_alternation() {
    let layer = Layer::gen(&[]);
    let summary = layer.decompose("d", &["--method", "eora"]);
    assert_eq!(summary["method"], "eora");
    let report = RunReport::read(layer.path("d/report.jsonl")).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.summary.iterations, 1);
}

#[test]
fn config_file_and_flags_combine() {
    let layer = Layer::gen(&[]);
    let cfg = layer.path("run.cfg");
    fs::write(&cfg, "sparsity = 2:4\nrank = 1\nsolver = oats\nsteps = 7\n").unwrap();
    let c = cfg.to_str().unwrap().to_string();
    let summary = layer.decompose("d", &["--config", &c, "--steps", "3"]);
    assert_eq!(summary["method"], "oats");
    assert_eq!(summary["iterations"], 3);
    assert_eq!(
        read_matrix(layer.path("d/a.slrt")).unwrap().shape(),
        (16, 2)
    );
}

#[test]
fn evaluate_exact_split_scores_zero() {
    let layer = Layer::gen(&[]);
    let w = read_matrix(layer.weights()).unwrap();
    let (sp, a, b) = (
        layer.path("s.slrt"),
        layer.path("a.slrt"),
        layer.path("b.slrt"),
    );
    let (pruned, _) = project(&w, SparsityPattern::nm(2, 4), None).unwrap();
    // Ŵ − P_S(Ŵ) written as a full-rank product (Ŵ − S)·I.
    write_matrix(&sp, &pruned).unwrap();
    write_matrix(&a, &(&w - &pruned)).unwrap();
    write_matrix(&b, &DenseMatrix::identity(16)).unwrap();
    let m = layer.evaluate(&sp, &a, &b);
    assert_eq!(m["objective"].as_f64().unwrap(), 0.0);
    assert_eq!(m["rel_output_err"].as_f64().unwrap(), 0.0);
    assert_eq!(m["sparsity"].as_f64().unwrap(), 0.5);
    assert_eq!(m["nm_valid"], true);
}

#[test]
fn evaluate_pruning_only_matches_direct_metric() {
    let layer = Layer::gen(&[]);
    let w = read_matrix(layer.weights()).unwrap();
    let xs = read_tensor(layer.calib()).unwrap().to_stack().unwrap();
    let (pruned, _) = project(&w, SparsityPattern::nm(2, 4), None).unwrap();
    let (sp, a, b) = (
        layer.path("s.slrt"),
        layer.path("a.slrt"),
        layer.path("b.slrt"),
    );
    write_matrix(&sp, &pruned).unwrap();
    write_matrix(&a, &DenseMatrix::zeros(16, 1)).unwrap();
    write_matrix(&b, &DenseMatrix::zeros(16, 1)).unwrap();
    let m = layer.evaluate(&sp, &a, &b);

    // ½‖X(Ŵ − S)‖²/N and ‖X(Ŵ − S)‖/‖XŴ‖ computed from raw activations.
    let (mut err, mut base, mut tokens) = (0.0, 0.0, 0usize);
    for x in &xs {
        err += x.matmul(&(&w - &pruned)).unwrap().frobenius_norm_sq();
        base += x.matmul(&w).unwrap().frobenius_norm_sq();
        tokens += x.rows();
    }
    let obj = m["objective"].as_f64().unwrap();
    assert!((obj - 0.5 * err / tokens as f64).abs() <= 1e-12 * obj.abs().max(1.0));
    let rel = m["rel_output_err"].as_f64().unwrap();
    assert!((rel - (err / base).sqrt()).abs() < 1e-12);
    assert_eq!(m["rank"], 0);
}

#[test]
fn evaluate_matches_library_objective() {
    let layer = Layer::gen(&["--seed", "11"]);
    let mut rng = stream_rng(11, Stream::Test);
    let sp = DenseMatrix::from_fn(16, 16, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let a = DenseMatrix::from_fn(16, 3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let b = DenseMatrix::from_fn(16, 3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let (ps, pa, pb) = (
        layer.path("s.slrt"),
        layer.path("a.slrt"),
        layer.path("b.slrt"),
    );
    write_matrix(&ps, &sp).unwrap();
    write_matrix(&pa, &a).unwrap();
    write_matrix(&pb, &b).unwrap();
    let (w, x) = (layer.weights(), layer.calib());
    let m = json(&ok(&[
        "evaluate",
        "--weights",
        s(&w),
        "--calib",
        s(&x),
        "--s",
        s(&ps),
        "--a",
        s(&pa),
        "--b",
        s(&pb),
        "--lambda",
        "0.3",
    ]));
    let gram = mean_gram(&read_tensor(&x).unwrap().to_stack().unwrap()).unwrap();
    let problem = LayerProblem::new(
        read_matrix(&w).unwrap(),
        gram,
        0.3,
        SparsityPattern::nm(2, 4),
        0,
    )
    .unwrap();
    let expected = objective(&problem, &sp, &a.matmul_t(&b).unwrap());
    let got = m["objective"].as_f64().unwrap();
    assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0));
    assert_eq!(m["nm_valid"], false);
    assert_eq!(m["rank"], 3);
}

#[test]
fn bench_emits_one_series_per_method() {
    let out = ok(&[
        "bench",
        "--sparsity",
        "2:4",
        "--rank",
        "2",
        "--n",
        "16",
        "--methods",
        "3basil,oats,eora",
        "--steps",
        "5",
        "--max-iters",
        "20",
    ]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("method,iter,objective"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let count = |m: &str| rows.iter().filter(|r| r[0] == m).count();
    assert_eq!(count("3basil"), 20);
    assert_eq!(count("oats"), 5);
    assert_eq!(count("eora"), 1);
    assert!(rows
        .iter()
        .all(|r| r[2].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn cascade_is_independent_of_worker_count() {
    let dir = TempDir::new().unwrap();
    let g = dir.path().join("g");
    ok(&[
        "gen",
        "--out",
        s(&g),
        "--blocks",
        "2",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "32",
        "--seq-len",
        "6",
        "--calib-count",
        "8",
    ]);
    let (b0, b1, x) = (g.join("block_0"), g.join("block_1"), g.join("calib.slrt"));
    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(format!("c{workers}"));
        let summary = json(&ok(&[
            "cascade",
            "--blocks",
            s(&b0),
            s(&b1),
            "--calib",
            s(&x),
            "--out",
            s(&out),
            "--sparsity",
            "2:4",
            "--rank",
            "2",
            "--workers",
            workers,
            "--tm",
            "--epochs",
            "2",
        ]));
        assert_eq!(summary["workers"].as_u64().unwrap().to_string(), workers);
        outputs.push(out);
    }
    for rel in [
        "activations.slrt",
        "block_0/q.s.slrt",
        "block_1/down.a.slrt",
        "block_1/tm.jsonl",
    ] {
        assert_eq!(
            fs::read(outputs[0].join(rel)).unwrap(),
            fs::read(outputs[1].join(rel)).unwrap(),
            "{rel}"
        );
    }
    // Layer reports differ only in the recorded worker count.
    let read = |out: &PathBuf| {
        let mut r = RunReport::read(out.join("block_0/reports/up.jsonl")).unwrap();
        assert!(r.summary.workers.is_some());
        r.summary.workers = None;
        r
    };
    assert_eq!(read(&outputs[0]), read(&outputs[1]));
}

#[test]
fn refine_tm_does_not_increase_block_error() {
    let dir = TempDir::new().unwrap();
    let g = dir.path().join("g");
    ok(&[
        "gen",
        "--out",
        s(&g),
        "--blocks",
        "1",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "32",
        "--seq-len",
        "6",
        "--calib-count",
        "8",
    ]);
    let (b0, x) = (g.join("block_0"), g.join("calib.slrt"));
    let c = dir.path().join("c");
    ok(&[
        "cascade",
        "--blocks",
        s(&b0),
        "--calib",
        s(&x),
        "--out",
        s(&c),
        "--sparsity",
        "2:4",
        "--rank",
        "2",
    ]);
    let r = dir.path().join("r");
    let summary = json(&ok(&[
        "refine-tm",
        "--dense",
        s(&b0),
        "--compressed",
        s(&c.join("block_0")),
        "--calib",
        s(&x),
        "--out",
        s(&r),
        "--epochs",
        "4",
    ]));
    let report = RunReport::read(r.join("report.jsonl")).unwrap();
    assert_eq!(report.records.len(), 5);
    assert!(summary["objective"].as_f64().unwrap() <= report.records[0].objective);
    assert_eq!(summary["pattern_valid"], true);
    // Masks survive the round trip unchanged.
    assert_eq!(
        fs::read(c.join("block_0/k.mask.slrt")).unwrap(),
        fs::read(r.join("k.mask.slrt")).unwrap()
    );
}

fn error_of(out: &Output) -> serde_json::Value {
    json(&String::from_utf8_lossy(&out.stderr))
}

#[test]
fn usage_errors_exit_two_with_json() {
    let out = slr(&["decompose", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"], "usage");

    let layer = Layer::gen(&[]);
    let (w, x, o) = (layer.weights(), layer.calib(), layer.path("d"));
    let out = slr(&[
        "decompose",
        "--weights",
        s(&w),
        "--calib",
        s(&x),
        "--out",
        s(&o),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = slr(&[
        "decompose",
        "--weights",
        s(&w),
        "--calib",
        s(&x),
        "--out",
        s(&o),
        "--sparsity",
        "2:4",
        "--rank",
        "1",
        "--method",
        "magic",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let out = slr(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen",
        "decompose",
        "refine-tm",
        "cascade",
        "evaluate",
        "bench",
    ] {
        assert!(text.contains(sub), "{sub}");
    }
    let out = slr(&["decompose", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Wanda"));
}

#[test]
fn bad_data_exits_three() {
    let layer = Layer::gen(&[]);
    let (w, x, o) = (layer.weights(), layer.calib(), layer.path("d"));
    let missing = layer.path("missing.slrt");
    let out = slr(&[
        "decompose",
        "--weights",
        s(&missing),
        "--calib",
        s(&x),
        "--out",
        s(&o),
        "--sparsity",
        "2:4",
        "--rank",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out)["error"], "io");

    let garbage = layer.path("garbage.slrt");
    fs::write(&garbage, b"NOPE0000").unwrap();
    let out = slr(&[
        "decompose",
        "--weights",
        s(&garbage),
        "--calib",
        s(&x),
        "--out",
        s(&o),
        "--sparsity",
        "2:4",
        "--rank",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out)["error"], "bad-magic");

    // Calibration width does not match n_in.
    let narrow = layer.path("narrow.slrt");
    write_matrix(&narrow, &DenseMatrix::identity(8)).unwrap();
    let out = slr(&[
        "decompose",
        "--weights",
        s(&w),
        "--calib",
        s(&narrow),
        "--out",
        s(&o),
        "--sparsity",
        "2:4",
        "--rank",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out)["error"], "shape-mismatch");

    let out = slr(&[
        "decompose",
        "--weights",
        s(&w),
        "--calib",
        s(&x),
        "--out",
        s(&o),
        "--sparsity",
        "3:5",
        "--rank",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn numerical_failure_exits_four() {
    let layer = Layer::gen(&[]);
    let (w, o) = (layer.weights(), layer.path("d"));
    // All-zero activations leave the weighting singular when λ = 0.
    let zeros = layer.path("zeros.slrt");
    write_matrix(&zeros, &DenseMatrix::zeros(4, 16)).unwrap();
    let out = slr(&[
        "decompose",
        "--weights",
        s(&w),
        "--calib",
        s(&zeros),
        "--out",
        s(&o),
        "--sparsity",
        "2:4",
        "--rank",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_of(&out)["error"], "not-positive-definite");
}
