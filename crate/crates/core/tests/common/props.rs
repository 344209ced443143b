//! Property checks shared by the invariant tests and the acceptance runner.

use etpd::graph::NetworkGraph;
use etpd::harness::generate_scalar_instance;
use etpd::problem::{
    estimate_kappa, fd_gradient, fd_jacobian, project_dual_cone, LocalSet, ProblemSpec, SampleRegion, FD_STEP,
};
use etpd::solver::{metric_matrix_p, min_eigenvalue, validate_step_sizes, Mode, SolverState};
use nalgebra::DVector;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use super::{arb_graph, arb_quadratic, dv, quad_spec, zero_start, QuadAgent};

pub fn arb_set(dim: usize) -> impl Strategy<Value = LocalSet> {
    prop_oneof![
        (
            prop::collection::vec(-3.0f64..0.0, dim),
            prop::collection::vec(0.0f64..3.0, dim)
        )
            .prop_map(|(l, u)| LocalSet::boxed(l, u).unwrap()),
        (prop::collection::vec(-2.0f64..2.0, dim), 0.1f64..3.0).prop_map(|(c, r)| LocalSet::ball(c, r).unwrap()),
        (prop::collection::vec(-1.0f64..1.0, dim), -1.0f64..1.0)
            .prop_filter("nonzero normal", |(n, _)| n.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|(n, o)| LocalSet::halfspace(n, o).unwrap()),
        Just(LocalSet::WholeSpace),
    ]
}

fn vec_of(dim: usize, r: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-r..r, dim).prop_map(DVector::from_vec)
}

pub fn arb_projection_case() -> impl Strategy<Value = (LocalSet, DVector<f64>, DVector<f64>)> {
    (1usize..=4).prop_flat_map(|d| (arb_set(d), vec_of(d, 6.0), vec_of(d, 6.0)))
}

/// Idempotence of `P_Ω` and `(y − P y)ᵀ(z − P y) ≤ 0` for `z ∈ Ω`.
pub fn check_projection((set, y, z): (LocalSet, DVector<f64>, DVector<f64>)) -> Result<(), TestCaseError> {
    let py = set.project(&y).unwrap();
    prop_assert!(set.contains(&py, 1e-10));
    let ppy = set.project(&py).unwrap();
    prop_assert!((&ppy - &py).norm() <= 1e-12 * (1.0 + py.norm()));
    let zin = set.project(&z).unwrap();
    prop_assert!((&y - &py).dot(&(&zin - &py)) <= 1e-10);
    Ok(())
}

pub fn arb_dual_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (
        0usize..=3,
        0usize..=3,
        prop::collection::vec(-5.0f64..5.0, 6),
        prop::collection::vec(0.0f64..5.0, 6),
    )
}

pub fn check_dual_projection((p, q, raw, other): (usize, usize, Vec<f64>, Vec<f64>)) -> Result<(), TestCaseError> {
    let y = DVector::from_iterator(p + q, raw.into_iter().take(p + q));
    let py = project_dual_cone(p, q, &y).unwrap();
    prop_assert_eq!(project_dual_cone(p, q, &py).unwrap(), py.clone());
    let z = DVector::from_fn(p + q, |i, _| if i < p { other[i] } else { other[i] - 2.5 });
    prop_assert!((&y - &py).dot(&(&z - &py)) <= 1e-12);
    Ok(())
}

pub type IterationCase = (Vec<QuadAgent>, NetworkGraph, f64, f64, bool);

pub fn arb_iteration_case() -> impl Strategy<Value = IterationCase> {
    (
        arb_quadratic(2..=4, 1..=2).prop_flat_map(|a| {
            let n = a.len();
            (Just(a), arb_graph(n))
        }),
        0.01f64..0.1,
        0.1f64..0.9,
        any::<bool>(),
    )
        .prop_map(|((a, g), alpha, frac, periodic)| {
            let beta = frac / (alpha * g.lambda_max());
            (a, g, alpha, beta, periodic)
        })
}

/// Ω/Θ membership, `‖λ − λ̃‖ ≤ ε` and `‖Σ s‖ ≤ 1e−9` along 60 iterations.
pub fn check_iterates((agents, graph, alpha, beta, periodic): IterationCase) -> Result<(), TestCaseError> {
    let mode = if periodic { Mode::Periodic } else { Mode::EventTriggered };
    let mut state = zero_start(quad_spec(&agents), graph, alpha, beta, mode);
    check_run(&mut state, 60)
}

pub fn check_run(state: &mut SolverState, steps: usize) -> Result<(), TestCaseError> {
    let problem = state.problem().clone();
    let (p, q) = (problem.p(), problem.q());
    for _ in 0..steps {
        let k = state.iter() + 1;
        if let Err(e) = state.step() {
            return Err(TestCaseError::reject(format!("diverged: {e}")));
        }
        for (i, (agent, st)) in problem.agents().iter().zip(state.agents()).enumerate() {
            prop_assert!(agent.local_set().contains(&st.x, 1e-12), "x_{} left its local set", i);
            let proj = project_dual_cone(p, q, &st.lam).unwrap();
            prop_assert!(proj == st.lam, "lambda_{} left the dual cone", i);
            let err = (&st.lam - &st.lam_broadcast).norm();
            let eps = state.config().threshold.epsilon(i, k);
            prop_assert!(err <= eps, "trigger error {} > {} at agent {}, k {}", err, eps, i, k);
        }
        prop_assert!(state.auxiliary_sum().norm() <= 1e-9);
    }
    Ok(())
}

fn project_onto_domain(spec: &ProblemSpec, raw: &DVector<f64>) -> DVector<f64> {
    let n = spec.total_dim();
    let xs = spec.split_primal(&raw.rows(0, n).into_owned()).unwrap();
    let ls = spec.split_dual(&raw.rows(n, raw.len() - n).into_owned()).unwrap();
    let mut blocks: Vec<DVector<f64>> = xs
        .iter()
        .zip(spec.agents())
        .map(|(x, a)| a.project(x).unwrap())
        .collect();
    blocks.extend(ls.iter().map(|l| project_dual_cone(spec.p(), spec.q(), l).unwrap()));
    ProblemSpec::stack(&blocks)
}

fn monotone_gap(spec: &ProblemSpec, seed_a: u64, seed_b: u64, half_width: f64) -> f64 {
    let region = SampleRegion::around(&DVector::zeros(spec.stacked_dim()), half_width);
    let a = project_onto_domain(spec, &region.sample(1, seed_a)[0]);
    let b = project_onto_domain(spec, &region.sample(1, seed_b)[0]);
    (spec.phi_stacked(&a).unwrap() - spec.phi_stacked(&b).unwrap()).dot(&(&a - &b))
}

pub fn arb_monotone_quadratic() -> impl Strategy<Value = (Vec<QuadAgent>, u64, u64)> {
    (arb_quadratic(2..=3, 1..=2), any::<u64>(), any::<u64>())
}

pub fn check_monotone_quadratic((agents, a, b): (Vec<QuadAgent>, u64, u64)) -> Result<(), TestCaseError> {
    let gap = monotone_gap(&quad_spec(&agents), a, b, 4.0);
    prop_assert!(gap >= -1e-10, "monotonicity violated: {}", gap);
    Ok(())
}

pub fn arb_monotone_benchmark() -> impl Strategy<Value = (u64, u64, u64)> {
    (0u64..200, any::<u64>(), any::<u64>())
}

pub fn check_monotone_benchmark((seed, a, b): (u64, u64, u64)) -> Result<(), TestCaseError> {
    let spec = generate_scalar_instance(seed, 3).unwrap().problem;
    let gap = monotone_gap(&spec, a, b, 5.0);
    prop_assert!(gap >= -1e-10, "monotonicity violated: {}", gap);
    Ok(())
}

pub fn arb_derivative_case() -> impl Strategy<Value = (u64, f64)> {
    (0u64..500, -1.0f64..1.0)
}

/// Analytic gradients and constraint Jacobians against central differences,
/// relative tolerance 1e−5.
pub fn check_derivatives((seed, x): (u64, f64)) -> Result<(), TestCaseError> {
    let inst = generate_scalar_instance(seed, 2).unwrap();
    let xv = dv(&[x]);
    for agent in inst.problem.agents() {
        let g = agent.gradient(&xv).unwrap();
        let g_fd = fd_gradient(&|y| agent.objective(y).unwrap(), &xv, FD_STEP);
        prop_assert!((g[0] - g_fd[0]).abs() <= 1e-5 * g[0].abs().max(1.0));
        let j = agent.psi_jacobian(&xv).unwrap();
        let j_fd = fd_jacobian(&|y| agent.psi(y).unwrap(), 2, &xv, FD_STEP);
        for (a, b) in j.iter().zip(j_fd.iter()) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }
    Ok(())
}

pub type MetricCase = (f64, f64, f64, NetworkGraph, usize, usize);

pub fn arb_metric_case() -> impl Strategy<Value = MetricCase> {
    (
        0.001f64..1.0,
        0.001f64..5.0,
        0.01f64..20.0,
        (2usize..=6).prop_flat_map(arb_graph),
        1usize..=3,
        1usize..=2,
    )
}

pub fn check_metric((alpha, beta, kappa, graph, n, m): MetricCase) -> Result<(), TestCaseError> {
    let report = validate_step_sizes(alpha, beta, kappa, graph.lambda_max());
    if report.ok {
        prop_assert!(min_eigenvalue(&metric_matrix_p(alpha, beta, &graph, n, m)) > 0.0);
    }
    Ok(())
}

pub fn arb_kappa_case() -> impl Strategy<Value = (u64, u64, usize, usize)> {
    (0u64..50, any::<u64>(), 2usize..20, 1usize..20)
}

pub fn check_kappa_nested((seed, sample_seed, small, extra): (u64, u64, usize, usize)) -> Result<(), TestCaseError> {
    let spec = generate_scalar_instance(seed, 3).unwrap().problem;
    let region = SampleRegion::around(&DVector::zeros(spec.stacked_dim()), 10.0);
    let k_small = estimate_kappa(&spec, &region, small, sample_seed).unwrap();
    let k_big = estimate_kappa(&spec, &region, small + extra, sample_seed).unwrap();
    prop_assert!(k_small <= k_big);
    Ok(())
}

pub fn arb_count_case() -> impl Strategy<Value = (Vec<QuadAgent>, NetworkGraph)> {
    arb_quadratic(2..=3, 1..=1).prop_flat_map(|a| {
        let n = a.len();
        (Just(a), arb_graph(n))
    })
}

pub fn check_counts((agents, graph): (Vec<QuadAgent>, NetworkGraph)) -> Result<(), TestCaseError> {
    let spec = quad_spec(&agents);
    let beta = 0.5 / (0.05 * graph.lambda_max());
    let mut ev = zero_start(spec.clone(), graph.clone(), 0.05, beta, Mode::EventTriggered);
    let mut pe = zero_start(spec, graph, 0.05, beta, Mode::Periodic);
    for _ in 0..40 {
        ev.step().unwrap();
        pe.step().unwrap();
    }
    for (e, p) in ev.trigger_counts().iter().zip(pe.trigger_counts()) {
        prop_assert!(*e <= p);
    }
    prop_assert_eq!(pe.trigger_counts(), vec![41; pe.agents().len()]);
    Ok(())
}

fn run_one<S: Strategy>(
    cases: u32,
    strategy: S,
    check: fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        ..Config::default()
    });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

/// Every property with `cases` random cases each, by name.
pub fn run_suite(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        (
            "projection idempotence + variational inequality",
            run_one(cases, arb_projection_case(), check_projection),
        ),
        (
            "dual cone projection",
            run_one(cases, arb_dual_case(), check_dual_projection),
        ),
        (
            "iterate membership, trigger bound, sum of s",
            run_one(cases, arb_iteration_case(), check_iterates),
        ),
        (
            "monotonicity of the operator (quadratic)",
            run_one(cases, arb_monotone_quadratic(), check_monotone_quadratic),
        ),
        (
            "monotonicity of the operator (benchmark)",
            run_one(cases, arb_monotone_benchmark(), check_monotone_benchmark),
        ),
        (
            "derivatives vs finite differences",
            run_one(cases, arb_derivative_case(), check_derivatives),
        ),
        (
            "metric positive definite when steps valid",
            run_one(cases, arb_metric_case(), check_metric),
        ),
        (
            "kappa monotone in nested samples",
            run_one(cases, arb_kappa_case(), check_kappa_nested),
        ),
        (
            "event-triggered counts below periodic",
            run_one(cases, arb_count_case(), check_counts),
        ),
    ]
}
