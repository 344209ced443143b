//! Event-triggered distributed primal-dual iteration.
//!
//! Each agent keeps a primal iterate `x_i`, a local multiplier `λ_i`, an
//! auxiliary consensus variable `s_i` and the last value it broadcast,
//! `λ̃_i`. A round runs in three phases separated by barriers:
//!
//! 1. optimistic primal-dual update of `x_i` and `λ_i` from iteration-`k`
//!    data only (neighbors' broadcasts `λ̃_j` from iteration `k`),
//! 2. trigger test `‖λ_i − λ̃_i‖ > ε_i`; on an event the new `λ_i` becomes
//!    the broadcast value,
//! 3. auxiliary update `s_i += β Σ_j a_ij (λ̃_i − λ̃_j)` with the fresh
//!    broadcasts.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NetworkGraph;
use crate::metrics::{RunTrace, TraceRow};
use crate::problem::{check_len, project_dual_cone, ProblemError, ProblemSpec};

/// Any state norm above this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical divergence at iteration {iter}: state norm {norm:e}")]
    NumericalDivergence { iter: usize, norm: f64 },
    #[error("graph has {graph} agents but problem has {problem}")]
    AgentCountMismatch { graph: usize, problem: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdKind {
    /// `c0 · exp(-rate · (k + 1))`
    Exponential {
        c0: f64,
        rate: f64,
    },
    /// `c0 / (k + 1)^exponent`
    Power {
        c0: f64,
        exponent: f64,
    },
    Zero,
}

impl ThresholdKind {
    fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: &str| Err(SolverError::InvalidConfig(msg.to_string()));
        match *self {
            ThresholdKind::Exponential { c0, rate } => {
                if !(c0 >= 0.0) || !c0.is_finite() {
                    return bad("exponential threshold needs c0 >= 0");
                }
                if !(rate > 0.0) || !rate.is_finite() {
                    return bad("exponential threshold needs rate > 0 to be summable");
                }
            }
            ThresholdKind::Power { c0, exponent } => {
                if !(c0 >= 0.0) || !c0.is_finite() {
                    return bad("power threshold needs c0 >= 0");
                }
                if !(exponent > 1.0) {
                    return bad("power threshold needs exponent > 1 to be summable");
                }
            }
            ThresholdKind::Zero => {}
        }
        Ok(())
    }

    pub fn at(&self, k: usize) -> f64 {
        let k1 = k as f64 + 1.0;
        match *self {
            ThresholdKind::Exponential { c0, rate } => c0 * (-rate * k1).exp(),
            ThresholdKind::Power { c0, exponent } => c0 / k1.powf(exponent),
            ThresholdKind::Zero => 0.0,
        }
    }
}

/// Triggering thresholds `ε_{i,k}`: a default rule with optional per-agent
/// overrides. Every rule is nonnegative, nonincreasing and summable, so the
/// same holds for `E_k = max_i ε_{i,k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    default: ThresholdKind,
    #[serde(default)]
    overrides: Vec<(usize, ThresholdKind)>,
}

impl ThresholdSchedule {
    pub fn new(default: ThresholdKind) -> Result<Self, SolverError> {
        default.validate()?;
        Ok(Self {
            default,
            overrides: Vec::new(),
        })
    }

    pub fn exponential(c0: f64, rate: f64) -> Result<Self, SolverError> {
        Self::new(ThresholdKind::Exponential { c0, rate })
    }

    pub fn zero() -> Self {
        Self {
            default: ThresholdKind::Zero,
            overrides: Vec::new(),
        }
    }

    pub fn with_override(mut self, agent: usize, kind: ThresholdKind) -> Result<Self, SolverError> {
        kind.validate()?;
        self.overrides.retain(|(a, _)| *a != agent);
        self.overrides.push((agent, kind));
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        self.default.validate()?;
        self.overrides.iter().try_for_each(|(_, k)| k.validate())
    }

    pub fn kind_for(&self, agent: usize) -> ThresholdKind {
        self.overrides
            .iter()
            .find(|(a, _)| *a == agent)
            .map(|(_, k)| *k)
            .unwrap_or(self.default)
    }

    /// `ε_{agent,k}`.
    pub fn epsilon(&self, agent: usize, k: usize) -> f64 {
        self.kind_for(agent).at(k)
    }

    /// `E_k = max_i ε_{i,k}` over `n_agents` agents.
    pub fn max_epsilon(&self, n_agents: usize, k: usize) -> f64 {
        (0..n_agents).map(|i| self.epsilon(i, k)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    EventTriggered,
    /// Unconditional broadcast every round.
    Periodic,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::EventTriggered => "event_triggered",
            Mode::Periodic => "periodic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub alpha: f64,
    pub beta: f64,
    pub threshold: ThresholdSchedule,
    pub mode: Mode,
    pub max_iters: usize,
    /// Stop once `‖ξ_{k+1} − ξ_k‖ + ‖s_{k+1} − s_k‖` falls to this value.
    /// Zero disables the test.
    pub stop_tol: f64,
    pub kappa_override: Option<f64>,
    /// Record every `trace_every`-th iteration (1 records all).
    pub trace_every: usize,
}

impl SolverConfig {
    pub fn new(alpha: f64, beta: f64, threshold: ThresholdSchedule, mode: Mode) -> Self {
        Self {
            alpha,
            beta,
            threshold,
            mode,
            max_iters: 20_000,
            stop_tol: 0.0,
            kappa_override: None,
            trace_every: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: &str| Err(SolverError::InvalidConfig(msg.to_string()));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad("beta must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.stop_tol >= 0.0) {
            return bad("stop_tol must be nonnegative");
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1");
        }
        if let Some(k) = self.kappa_override {
            if !(k > 0.0) {
                return bad("kappa_override must be positive");
            }
        }
        self.threshold.validate()
    }
}

/// Outcome of checking `α < 1/(3κ_c)` and `β ≤ (1 − 3ακ_c)/(α λ_max(L))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSizeReport {
    pub ok: bool,
    pub alpha_bound: f64,
    /// `alpha_bound − α`; positive when the α condition holds.
    pub alpha_margin: f64,
    pub beta_bound: f64,
    /// `beta_bound − β`; nonnegative when the β condition holds.
    pub beta_margin: f64,
    /// `λ_min(P)` for `P = I/α − β L_s`.
    pub p_min_eigenvalue: f64,
    /// Largest `κ_c` for which the given `α`, `β` would pass.
    pub max_admissible_kappa: f64,
}

pub fn validate_step_sizes(alpha: f64, beta: f64, kappa_c: f64, lambda_max_l: f64) -> StepSizeReport {
    let alpha_bound = 1.0 / (3.0 * kappa_c);
    let beta_bound = (1.0 - 3.0 * alpha * kappa_c) / (alpha * lambda_max_l);
    // L_s = diag(0, L ⊗ I): its spectrum is {0} ∪ spec(L).
    let p_min_eigenvalue = (1.0 / alpha).min(1.0 / alpha - beta * lambda_max_l);
    let alpha_ok = alpha < alpha_bound;
    let beta_ok = beta <= beta_bound;
    StepSizeReport {
        ok: alpha_ok && beta_ok && p_min_eigenvalue > 0.0,
        alpha_bound,
        alpha_margin: alpha_bound - alpha,
        beta_bound,
        beta_margin: beta_bound - beta,
        p_min_eigenvalue,
        max_admissible_kappa: (1.0 / alpha - beta * lambda_max_l) / 3.0,
    }
}

/// Dense `P = I_r/α − β diag(0_n, L ⊗ I_m)`.
pub fn metric_matrix_p(alpha: f64, beta: f64, graph: &NetworkGraph, n: usize, m: usize) -> DMatrix<f64> {
    let big_n = graph.n_agents();
    let r = n + big_n * m;
    let mut p = DMatrix::identity(r, r) / alpha;
    let lap = graph.laplacian();
    for i in 0..big_n {
        for j in 0..big_n {
            for c in 0..m {
                p[(n + i * m + c, n + j * m + c)] -= beta * lap[(i, j)];
            }
        }
    }
    p
}

/// Dense `W = (1/β)(L + 1 1ᵀ)^{-1} ⊗ I_m`.
pub fn metric_matrix_w(beta: f64, graph: &NetworkGraph, m: usize) -> Option<DMatrix<f64>> {
    let big_n = graph.n_agents();
    let shifted = graph.laplacian() + DMatrix::from_element(big_n, big_n, 1.0);
    let inv = shifted.try_inverse()? / beta;
    Some(inv.kronecker(&DMatrix::<f64>::identity(m, m)))
}

pub fn min_eigenvalue(matrix: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(matrix.clone()).eigenvalues.min()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub x_prev: DVector<f64>,
    pub lam: DVector<f64>,
    pub lam_prev: DVector<f64>,
    pub s: DVector<f64>,
    /// Last broadcast multiplier `λ̃_i`.
    pub lam_broadcast: DVector<f64>,
    /// Number of broadcasts so far, including the initial one.
    pub trigger_count: u64,
}

/// Per-round telemetry returned by [`SolverState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub iter: usize,
    pub fixed_point_residual: f64,
    pub broadcasts: Vec<bool>,
}

/// Stacked algorithm state `ξ_k = (x_k; λ_k)`, `s_k` and broadcasts.
#[derive(Debug, Clone)]
pub struct SolverState {
    problem: Arc<ProblemSpec>,
    graph: Arc<NetworkGraph>,
    config: SolverConfig,
    agents: Vec<AgentState>,
    iter: usize,
}

impl SolverState {
    /// Initial state: `s = 0`, history equal to the current values and a
    /// mandatory broadcast from every agent. `lam0` blocks are projected
    /// onto the dual cone and `x0` blocks onto the local sets.
    pub fn new(
        problem: Arc<ProblemSpec>,
        graph: Arc<NetworkGraph>,
        config: SolverConfig,
        x0: &[DVector<f64>],
        lam0: &[DVector<f64>],
    ) -> Result<Self, SolverError> {
        config.validate()?;
        let n = problem.n_agents();
        if graph.n_agents() != n {
            return Err(SolverError::AgentCountMismatch {
                graph: graph.n_agents(),
                problem: n,
            });
        }
        check_len("initial primal blocks", n, x0.len())?;
        check_len("initial dual blocks", n, lam0.len())?;
        let (p, q, m) = (problem.p(), problem.q(), problem.m());
        let agents = problem
            .agents()
            .iter()
            .zip(x0.iter().zip(lam0))
            .map(|(agent, (x, l))| {
                check_len("initial primal", agent.dim(), x.len())?;
                let x = agent.project(x)?;
                let lam = project_dual_cone(p, q, l)?;
                Ok(AgentState {
                    x_prev: x.clone(),
                    x,
                    lam_prev: lam.clone(),
                    lam_broadcast: lam.clone(),
                    lam,
                    s: DVector::zeros(m),
                    trigger_count: 1,
                })
            })
            .collect::<Result<Vec<_>, SolverError>>()?;
        Ok(Self {
            problem,
            graph,
            config,
            agents,
            iter: 0,
        })
    }

    /// All-zero primal and dual start, projected onto the feasible sets.
    pub fn zero_start(
        problem: Arc<ProblemSpec>,
        graph: Arc<NetworkGraph>,
        config: SolverConfig,
    ) -> Result<Self, SolverError> {
        let x0: Vec<_> = problem.agents().iter().map(|a| DVector::zeros(a.dim())).collect();
        let lam0 = vec![DVector::zeros(problem.m()); problem.n_agents()];
        Self::new(problem, graph, config, &x0, &lam0)
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    /// Direct access for warm starts and fixed-point experiments. Callers
    /// are responsible for keeping iterates inside their sets.
    pub fn agents_mut(&mut self) -> &mut [AgentState] {
        &mut self.agents
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn primal_blocks(&self) -> Vec<DVector<f64>> {
        self.agents.iter().map(|a| a.x.clone()).collect()
    }

    pub fn dual_blocks(&self) -> Vec<DVector<f64>> {
        self.agents.iter().map(|a| a.lam.clone()).collect()
    }

    pub fn x_stacked(&self) -> DVector<f64> {
        ProblemSpec::stack(&self.primal_blocks())
    }

    pub fn lambda_stacked(&self) -> DVector<f64> {
        ProblemSpec::stack(&self.dual_blocks())
    }

    /// `Σ_i s_i`; zero for every `k` in exact arithmetic.
    pub fn auxiliary_sum(&self) -> DVector<f64> {
        self.agents
            .iter()
            .fold(DVector::zeros(self.problem.m()), |acc, a| acc + &a.s)
    }

    /// Mean of the agents' multipliers, the natural estimate of `λ_0`.
    pub fn mean_multiplier(&self) -> DVector<f64> {
        let sum = self
            .agents
            .iter()
            .fold(DVector::zeros(self.problem.m()), |acc, a| acc + &a.lam);
        sum / self.agents.len() as f64
    }

    /// `max_{i,j} ‖λ_i − λ_j‖`.
    pub fn dual_consensus(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (i, a) in self.agents.iter().enumerate() {
            for b in &self.agents[i + 1..] {
                worst = worst.max((&a.lam - &b.lam).norm());
            }
        }
        worst
    }

    pub fn trigger_counts(&self) -> Vec<u64> {
        self.agents.iter().map(|a| a.trigger_count).collect()
    }

    /// Average broadcast count `C_s`.
    pub fn average_broadcasts(&self) -> f64 {
        self.agents.iter().map(|a| a.trigger_count as f64).sum::<f64>() / self.agents.len() as f64
    }

    /// Euclidean norm of the full state; NaN propagates.
    fn state_norm(&self) -> f64 {
        let mut sq = 0.0;
        for a in &self.agents {
            sq += a.x.norm_squared() + a.lam.norm_squared() + a.s.norm_squared();
        }
        sq.sqrt()
    }

    /// Advance by one synchronous round.
    pub fn step(&mut self) -> Result<StepInfo, SolverError> {
        let alpha = self.config.alpha;
        let beta = self.config.beta;
        let (p, q) = (self.problem.p(), self.problem.q());
        let graph = Arc::clone(&self.graph);
        let problem = Arc::clone(&self.problem);
        let next_k = self.iter + 1;

        // Phase 1: local primal-dual updates from iteration-k data only.
        let broadcasts_k: Vec<DVector<f64>> = self.agents.iter().map(|a| a.lam_broadcast.clone()).collect();
        let mut updates = Vec::with_capacity(self.agents.len());
        for (i, (agent, st)) in problem.agents().iter().zip(&self.agents).enumerate() {
            let w_now = agent.lagrangian_gradient(&st.x, &st.lam)?;
            let w_prev = agent.lagrangian_gradient(&st.x_prev, &st.lam_prev)?;
            let x_next = agent.project(&(&st.x - w_now * (2.0 * alpha) + w_prev * alpha))?;

            let psi_now = agent.psi(&st.x)?;
            let psi_prev = agent.psi(&st.x_prev)?;
            let disagreement = graph.laplacian_row_apply(i, &broadcasts_k);
            let lam_arg =
                &st.lam + psi_now * (2.0 * alpha) - psi_prev * alpha - &st.s * alpha - disagreement * (alpha * beta);
            let lam_next = project_dual_cone(p, q, &lam_arg)?;
            updates.push((x_next, lam_next));
        }

        let mut change_sq = 0.0;
        for (st, (x_next, lam_next)) in self.agents.iter_mut().zip(updates) {
            change_sq += (&x_next - &st.x).norm_squared() + (&lam_next - &st.lam).norm_squared();
            st.x_prev = std::mem::replace(&mut st.x, x_next);
            st.lam_prev = std::mem::replace(&mut st.lam, lam_next);
        }

        // Phase 2: trigger test against the previous broadcast.
        let mut broadcasts = Vec::with_capacity(self.agents.len());
        for (i, st) in self.agents.iter_mut().enumerate() {
            let fire = match self.config.mode {
                Mode::Periodic => true,
                Mode::EventTriggered => (&st.lam - &st.lam_broadcast).norm() > self.config.threshold.epsilon(i, next_k),
            };
            if fire {
                st.lam_broadcast.copy_from(&st.lam);
                st.trigger_count += 1;
            }
            broadcasts.push(fire);
        }

        // Phase 3: auxiliary update with the fresh broadcasts.
        let broadcasts_next: Vec<DVector<f64>> = self.agents.iter().map(|a| a.lam_broadcast.clone()).collect();
        let mut s_change_sq = 0.0;
        for (i, st) in self.agents.iter_mut().enumerate() {
            let delta = graph.laplacian_row_apply(i, &broadcasts_next) * beta;
            s_change_sq += delta.norm_squared();
            st.s += delta;
        }

        self.iter = next_k;
        let norm = self.state_norm();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(SolverError::NumericalDivergence { iter: next_k, norm });
        }
        Ok(StepInfo {
            iter: next_k,
            fixed_point_residual: change_sq.sqrt() + s_change_sq.sqrt(),
            broadcasts,
        })
    }
}

/// When to stop [`run`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_iters: usize,
    /// Zero disables.
    pub fixed_point_tol: f64,
    /// `(f*, target)`: stop once `|f(x_k) − f*| ≤ target`.
    pub objective_target: Option<(f64, f64)>,
}

impl StopRule {
    pub fn from_config(config: &SolverConfig) -> Self {
        Self {
            max_iters: config.max_iters,
            fixed_point_tol: config.stop_tol,
            objective_target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    FixedPoint,
    ObjectiveTarget,
}

/// Iterate [`SolverState::step`] until a stop rule fires, recording a trace.
/// `f_star`, when known, fills the objective-gap column.
pub fn run(
    state: &mut SolverState,
    stop: StopRule,
    f_star: Option<f64>,
    instance_tag: &str,
) -> Result<(RunTrace, StopReason), SolverError> {
    let problem = Arc::clone(&state.problem);
    let mut trace = RunTrace::new(
        instance_tag,
        state.config.mode,
        problem.total_dim(),
        problem.n_agents() * problem.m(),
    );
    let every = state.config.trace_every;
    let mut reason = StopReason::MaxIters;
    for _ in 0..stop.max_iters {
        let info = state.step()?;
        let x = state.x_stacked();
        let lam = state.lambda_stacked();
        trace.accumulate_ergodic(&x, &lam);

        let xs = state.primal_blocks();
        let objective = problem.objective_blocks(&xs)?;
        let gap = f_star.map(|f| (objective - f).abs());
        let converged = stop.fixed_point_tol > 0.0 && info.fixed_point_residual <= stop.fixed_point_tol;
        let on_target = matches!(stop.objective_target, Some((f, t)) if (objective - f).abs() <= t);
        let last = converged || on_target || info.iter == stop.max_iters;

        if info.iter % every == 0 || last {
            trace.push(TraceRow {
                k: info.iter,
                objective,
                objective_gap: gap,
                constraint_violation: problem.constraint_violation_blocks(&xs)?,
                dual_consensus: state.dual_consensus(),
                fixed_point_residual: info.fixed_point_residual,
                trigger_counts: state.trigger_counts(),
                ergodic_x: trace.ergodic_x(),
                ergodic_lambda: trace.ergodic_lambda(),
            });
        }
        if converged {
            reason = StopReason::FixedPoint;
            break;
        }
        if on_target {
            reason = StopReason::ObjectiveTarget;
            break;
        }
    }
    Ok((trace, reason))
}
