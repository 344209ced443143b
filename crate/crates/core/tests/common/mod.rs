#![allow(dead_code)]

pub mod props;

use std::sync::Arc;

use etpd::graph::NetworkGraph;
use etpd::problem::{AgentProblem, LocalSet, ProblemSpec};
use etpd::solver::{Mode, SolverConfig, SolverState, ThresholdSchedule};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

pub fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// `min ½x₁² + ½x₂²` s.t. `x₁ + x₂ = 1`. Optimum `(0.5, 0.5)`, `λ* = −0.5`,
/// `f* = 0.25`.
pub fn two_agent_budget(set: LocalSet) -> ProblemSpec {
    let agent = |offset: f64| {
        AgentProblem::builder(1)
            .objective(|x| 0.5 * x[0] * x[0], |x| dv(&[x[0]]))
            .equality(DMatrix::from_element(1, 1, 1.0), dv(&[offset]))
            .local_set(set.clone())
            .build()
            .unwrap()
    };
    ProblemSpec::new(vec![agent(-1.0), agent(0.0)]).unwrap()
}

/// Separable quadratic agent `Σ_j w_j (x_j − t_j)²` with affine coupled rows.
#[derive(Debug, Clone)]
pub struct QuadAgent {
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
    pub ineq: Vec<(Vec<f64>, f64)>,
    pub eq: Vec<(Vec<f64>, f64)>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadAgent {
    pub fn build(&self) -> AgentProblem {
        let (w, t) = (dv(&self.weights), dv(&self.targets));
        let (w2, t2) = (w.clone(), t.clone());
        let n = w.len();
        let mut b = AgentProblem::builder(n).objective(
            move |x| (x - &t).component_mul(&(x - &t)).dot(&w),
            move |x| (x - &t2).component_mul(&w2) * 2.0,
        );
        if !self.ineq.is_empty() {
            let g = DMatrix::from_fn(self.ineq.len(), n, |r, c| self.ineq[r].0[c]);
            let g0 = DVector::from_iterator(self.ineq.len(), self.ineq.iter().map(|r| r.1));
            let gj = g.clone();
            b = b.inequality(self.ineq.len(), move |x| &g * x + &g0, move |_| gj.clone());
        }
        if !self.eq.is_empty() {
            let m = DMatrix::from_fn(self.eq.len(), n, |r, c| self.eq[r].0[c]);
            let o = DVector::from_iterator(self.eq.len(), self.eq.iter().map(|r| r.1));
            b = b.equality(m, o);
        }
        b.local_set(LocalSet::boxed(self.lower.clone(), self.upper.clone()).unwrap())
            .build()
            .unwrap()
    }
}

pub fn quad_spec(agents: &[QuadAgent]) -> ProblemSpec {
    ProblemSpec::new(agents.iter().map(QuadAgent::build).collect()).unwrap()
}

/// Random separable-quadratic instance: `n_agents` agents of dimension
/// `dim`, `p` affine inequality rows and `q` affine equality rows.
pub fn arb_quadratic(
    n_agents: std::ops::RangeInclusive<usize>,
    dim: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Vec<QuadAgent>> {
    (n_agents, dim, 0usize..=2, 0usize..=1).prop_flat_map(|(na, d, p, q)| {
        let agent = (
            prop::collection::vec(0.1f64..2.0, d),
            prop::collection::vec(-2.0f64..2.0, d),
            prop::collection::vec((prop::collection::vec(-1.0f64..1.0, d), -1.0f64..0.0), p),
            prop::collection::vec((prop::collection::vec(-1.0f64..1.0, d), -0.5f64..0.5), q),
            prop::collection::vec(0.2f64..2.0, d),
        )
            .prop_map(|(weights, targets, ineq, eq, half)| QuadAgent {
                weights,
                targets,
                ineq,
                eq,
                lower: half.iter().map(|h| -h).collect(),
                upper: half,
            });
        prop::collection::vec(agent, na)
    })
}

/// Connected graph on `n` nodes: a path plus random extra edges.
pub fn arb_graph(n: usize) -> impl Strategy<Value = NetworkGraph> {
    prop::collection::vec((0..n, 0..n, 0.2f64..2.0), 0..=n).prop_map(move |extra| {
        let mut edges: Vec<(usize, usize, f64)> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        for (i, j, w) in extra {
            let (a, b) = (i.min(j), i.max(j));
            if a != b && !edges.iter().any(|e| e.0 == a && e.1 == b) {
                edges.push((a, b, w));
            }
        }
        NetworkGraph::from_edges(n, &edges).unwrap()
    })
}

pub fn zero_start(problem: ProblemSpec, graph: NetworkGraph, alpha: f64, beta: f64, mode: Mode) -> SolverState {
    let cfg = SolverConfig::new(alpha, beta, ThresholdSchedule::exponential(1.0, 0.05).unwrap(), mode);
    SolverState::zero_start(Arc::new(problem), Arc::new(graph), cfg).unwrap()
}

fn quad(
    weights: &[f64],
    targets: &[f64],
    ineq: Vec<(Vec<f64>, f64)>,
    eq: Vec<(Vec<f64>, f64)>,
    half: f64,
) -> QuadAgent {
    let d = weights.len();
    QuadAgent {
        weights: weights.to_vec(),
        targets: targets.to_vec(),
        ineq,
        eq,
        lower: vec![-half; d],
        upper: vec![half; d],
    }
}

/// Small box-constrained instances for cross-checking the oracles.
pub fn hand_instances() -> Vec<(&'static str, ProblemSpec)> {
    vec![
        ("budget", two_agent_budget(LocalSet::uniform_box(1, -1.0, 1.0).unwrap())),
        (
            // three agents pulled apart, joint cap x₁ + x₂ + x₃ ≤ 0.5 and
            // tie x₁ = x₃
            "cap-and-tie",
            quad_spec(&[
                quad(&[1.0], &[1.0], vec![(vec![1.0], -0.5)], vec![(vec![1.0], 0.0)], 1.0),
                quad(&[2.0], &[0.8], vec![(vec![1.0], 0.0)], vec![(vec![0.0], 0.0)], 1.0),
                quad(&[0.5], &[-0.3], vec![(vec![1.0], 0.0)], vec![(vec![-1.0], 0.0)], 1.0),
            ]),
        ),
        (
            // two-dimensional agent next to a scalar one, active box bound
            "mixed-dims",
            quad_spec(&[
                quad(&[1.0, 0.5], &[2.0, -1.0], vec![(vec![1.0, -1.0], -1.0)], vec![], 1.0),
                quad(&[1.5], &[0.4], vec![(vec![0.5], 0.0)], vec![], 0.5),
            ]),
        ),
    ]
}
