use nalgebra::DMatrix;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use slr_core::linalg::numerical_rank;
use slr_core::rng::{stream_rng, Stream};
use slr_core::solver::{damped_hessian, mean_gram, RhoSchedule, RANK_TOL};
use slr_core::synth::{benchmark_problem, planted_weights};
use slr_core::tensor_io::{Damping, SolverChoice};
use slr_core::{
    decompose, objective, solve_3basil, DenseMatrix, LayerProblem, RunConfig, SparsityPattern,
};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = stream_rng(seed, Stream::Test);
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn damped_hessian_of_identity_gram() {
    let w = DenseMatrix::zeros(4, 4);
    let problem = LayerProblem::new(
        w,
        DenseMatrix::identity(4),
        0.0,
        SparsityPattern::nm(2, 4),
        1,
    )
    .unwrap();
    let h = damped_hessian(&problem, Damping::default());
    // 1 + 0.005·1 + 0.005·tr(I) = 1.025 for n = 4.
    let want = 1.0 + 0.005 + 0.005 * 4.0;
    assert!(h.max_abs_diff(&DenseMatrix::identity(4).scale(want)) < 1e-15);
}

#[test]
fn damped_hessian_is_positive_definite() {
    // A rank-deficient Gram still yields a strictly positive H′.
    let x = gaussian(3, 10, 1);
    let gram = mean_gram(&[x]).unwrap();
    let problem = LayerProblem::new(
        DenseMatrix::zeros(10, 8),
        gram.clone(),
        0.0,
        SparsityPattern::nm(2, 4),
        2,
    )
    .unwrap();
    let h = damped_hessian(&problem, Damping::default());
    let na = DMatrix::from_fn(10, 10, |i, j| h[(i, j)]);
    let smallest = na.symmetric_eigen().eigenvalues.min();
    assert!(smallest > 0.0);
    assert!((smallest - 0.005 * gram.trace()).abs() < 1e-3 * gram.trace());
}

#[test]
fn gram_objective_equals_output_error() {
    let x = gaussian(40, 12, 2);
    let w = gaussian(12, 8, 3);
    let s = gaussian(12, 8, 4).scale(0.5);
    let l = gaussian(12, 8, 5).scale(0.5);
    let lambda = 0.7;
    let problem =
        LayerProblem::from_activations(w.clone(), &x, lambda, SparsityPattern::nm(2, 4), 2)
            .unwrap();
    let e = &(&w - &s) - &l;
    let direct =
        0.5 * x.matmul(&e).unwrap().frobenius_norm_sq() + 0.5 * lambda * e.frobenius_norm_sq();
    let got = objective(&problem, &s, &l);
    assert!((got - direct).abs() < 1e-10 * direct);
}

#[test]
fn mean_gram_averages_over_tokens() {
    let a = gaussian(5, 3, 6);
    let b = gaussian(7, 3, 7);
    let g = mean_gram(&[a.clone(), b.clone()]).unwrap();
    let stacked = DenseMatrix::vstack(&[&a, &b]).unwrap();
    let want = stacked.t_matmul(&stacked).unwrap().scale(1.0 / 12.0);
    assert!(g.max_abs_diff(&want) < 1e-14);
}

fn method(index: usize) -> SolverChoice {
    match index {
        0 => SolverChoice::ThreeBasil,
        1 => SolverChoice::AltMin { steps: 10 },
        2 => SolverChoice::Oats { steps: 10 },
        _ => SolverChoice::Eora,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_method_returns_a_feasible_pair(
        seed in 0u64..1000,
        which in 0usize..4,
        precondition in any::<bool>(),
        rank in 0usize..4,
        nm in prop_oneof![Just((1usize, 4usize)), Just((2, 4)), Just((4, 8))],
    ) {
        let pattern = SparsityPattern::nm(nm.0, nm.1);
        let problem = benchmark_problem(seed, 16, pattern, rank, 0.01).unwrap();
        let mut config = RunConfig::new(pattern, rank);
        config.solver = method(which);
        config.precondition = precondition;
        config.max_iters = 40;
        config.seed = seed;
        let out = decompose(&problem, &config).unwrap();
        let support = slr_core::Support::of_nonzeros(&out.sparse);
        prop_assert!(pattern.admits(&support));
        prop_assert!(numerical_rank(&out.low_rank, RANK_TOL).unwrap() <= rank);
        prop_assert!(out.report.summary.pattern_valid);
        prop_assert!(out.report.summary.rank <= rank);
        let obj = objective(&problem, &out.sparse, &out.low_rank);
        prop_assert!((obj - out.report.summary.objective).abs() <= 1e-9 * obj.max(1e-12));
    }
}

#[test]
fn admm_is_competitive_with_alternating_minimization() {
    let pattern = SparsityPattern::nm(2, 4);
    let mut ratios = Vec::new();
    let mut wins = 0;
    for seed in 0..20 {
        let problem = benchmark_problem(seed, 16, pattern, 2, 0.01).unwrap();
        let mut config = RunConfig::new(pattern, 2);
        config.seed = seed;
        let admm = decompose(&problem, &config)
            .unwrap()
            .report
            .summary
            .objective;
        config.solver = SolverChoice::AltMin { steps: 80 };
        let alt = decompose(&problem, &config)
            .unwrap()
            .report
            .summary
            .objective;
        if admm <= alt {
            wins += 1;
        }
        ratios.push(admm / alt);
    }
    assert!(wins >= 12, "3basil no worse on only {wins}/20 seeds");
    assert!(
        median(ratios.clone()) <= 1.0,
        "median ratio {}",
        median(ratios)
    );
}

#[test]
fn residuals_shrink_under_step_schedule() {
    let pattern = SparsityPattern::nm(2, 4);
    let problem = benchmark_problem(3, 16, pattern, 2, 0.01).unwrap();
    let mut config = RunConfig::new(pattern, 2);
    config.rho_schedule = RhoSchedule::StepFunction { period: 10 };
    config.tol_abs = 0.0;
    config.tol_rel = 0.0;
    config.max_iters = 200;
    let out = solve_3basil(&problem, &config).unwrap();
    let records = &out.report.records;
    assert!(records.len() >= 200);
    let window = |lo: usize, hi: usize, f: &dyn Fn(&slr_core::tensor_io::IterRecord) -> f64| {
        median(
            records
                .iter()
                .filter(|r| r.iter >= lo && r.iter <= hi)
                .map(f)
                .collect(),
        )
    };
    let primal = |r: &slr_core::tensor_io::IterRecord| r.primal_residual.unwrap();
    let motion = |r: &slr_core::tensor_io::IterRecord| r.delta_sum.unwrap();
    assert!(window(1, 20, &primal) > window(180, 200, &primal));
    assert!(window(1, 20, &motion) > window(180, 200, &motion));
    let rhos: Vec<f64> = records.iter().map(|r| r.rho.unwrap()).collect();
    assert!(rhos.windows(2).all(|w| w[1] >= w[0]), "rho never decreases");
}

#[test]
fn planted_split_is_recovered() {
    let pattern = SparsityPattern::nm(2, 4);
    let mut rng = stream_rng(9, Stream::Gen);
    let (w, s_star, l_star) = planted_weights(16, 16, pattern, 2, 0.0, &mut rng).unwrap();
    let x = gaussian(64, 16, 10);
    let problem = LayerProblem::from_activations(w, &x, 0.0, pattern, 2).unwrap();
    let mut config = RunConfig::new(pattern, 2);
    config.max_iters = 1000;
    let out = solve_3basil(&problem, &config).unwrap();
    let baseline = objective(
        &problem,
        &DenseMatrix::zeros(16, 16),
        &DenseMatrix::zeros(16, 16),
    );
    assert!(objective(&problem, &s_star, &l_star) < 1e-20);
    assert!(out.report.summary.objective < 1e-6 * baseline);
}

#[test]
fn runs_are_deterministic() {
    let pattern = SparsityPattern::nm(2, 4);
    let problem = benchmark_problem(5, 16, pattern, 2, 0.01).unwrap();
    let config = RunConfig::new(pattern, 2);
    let a = solve_3basil(&problem, &config).unwrap();
    let b = solve_3basil(&problem, &config).unwrap();
    assert_eq!(a.sparse, b.sparse);
    assert_eq!(a.low_rank, b.low_rank);
    let (mut ra, mut rb) = (a.report, b.report);
    ra.strip_timing();
    rb.strip_timing();
    assert_eq!(ra, rb);
}

#[test]
fn full_rank_budget_removes_the_error() {
    let pattern = SparsityPattern::nm(2, 4);
    let problem = benchmark_problem(6, 8, pattern, 8, 0.01).unwrap();
    let baseline = objective(
        &problem,
        &DenseMatrix::zeros(8, 8),
        &DenseMatrix::zeros(8, 8),
    );
    for which in 0..4 {
        let mut config = RunConfig::new(pattern, 8);
        config.solver = method(which);
        let out = decompose(&problem, &config).unwrap();
        assert!(
            out.report.summary.objective <= 1e-12 * baseline,
            "method {which}"
        );
    }
}
