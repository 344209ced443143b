//! Experiment definition and orchestration: configuration files, the
//! randomized scalar benchmark family, seeded runs and report output.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, NetworkGraph};
use crate::metrics::{
    comm_summary, ergodic_gap_series, scaled_gap_growth, CommSummary, ErgodicPoint, MetricsError, RunTrace,
};
use crate::oracle::{
    centralized_solve, grid_oracle, kkt_residuals, KktCertificate, OracleConfig, OracleError, GRID_MAX_DIM,
};
use crate::problem::{estimate_kappa, AgentProblem, LocalSet, ProblemError, ProblemSpec, SampleRegion};
use crate::solver::{
    run, validate_step_sizes, Mode, SolverConfig, SolverError, SolverState, StepSizeReport, StopReason, StopRule,
    ThresholdKind, ThresholdSchedule,
};

/// Half-width of the sampling box used for `κ_c` when no override is set.
pub const KAPPA_REGION_HALF_WIDTH: f64 = 10.0;
pub const KAPPA_SAMPLES: usize = 64;
/// Redraw budget for infeasible random instances.
pub const MAX_INSTANCE_ATTEMPTS: u32 = 16;
/// Interior margin demanded of the equality block by the feasibility probe.
pub const SLATER_MARGIN: f64 = 0.1;
/// Window of the ergodic rate check.
pub const RATE_WINDOW: (usize, usize) = (100, 5000);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no feasible instance after {0} attempts")]
    InfeasibleInstance(u32),
}

impl HarnessError {
    /// Process exit status: 1 configuration/IO, 2 numerical, 3 oracle.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Solver(SolverError::NumericalDivergence { .. }) => 2,
            HarnessError::Solver(SolverError::Problem(_)) | HarnessError::Metrics(_) => 2,
            HarnessError::Oracle(_) | HarnessError::InfeasibleInstance(_) => 3,
            _ => 1,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

// ---------------------------------------------------------------------------
// Randomized scalar benchmark
// ---------------------------------------------------------------------------

/// Coefficients of one agent of the scalar benchmark:
/// `f = a x² + b x + c log(1 + e^{d x})`, `g = π x² + ς`, `h = γ x + δ`,
/// `x ∈ [−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub pi: f64,
    pub varsigma: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Sampling ranges, keyed by coefficient name.
pub const COEFFICIENT_RANGES: [(&str, f64, f64); 8] = [
    ("a", 0.0, 2.0),
    ("b", -5.0, 5.0),
    ("c", 0.0, 2.0),
    ("d", 0.0, 1.0),
    ("pi", 0.0, 2.0),
    ("varsigma", -2.0, 0.0),
    ("gamma", -1.0, 1.0),
    ("delta", -2.0, 2.0),
];

/// Uniform draw keyed by `(seed, attempt, agent, coefficient)`. ChaCha is a
/// counter-mode generator, so each key selects an independent stream and
/// adding agents never shifts earlier agents' draws.
fn keyed_uniform(seed: u64, attempt: u32, agent: usize, coeff: usize, lo: f64, hi: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((attempt as u64) << 40) | ((agent as u64) << 8) | coeff as u64);
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}

impl ScalarCoefficients {
    pub fn draw(seed: u64, attempt: u32, agent: usize) -> Self {
        let v: Vec<f64> = COEFFICIENT_RANGES
            .iter()
            .enumerate()
            .map(|(idx, (_, lo, hi))| keyed_uniform(seed, attempt, agent, idx, *lo, *hi))
            .collect();
        Self {
            a: v[0],
            b: v[1],
            c: v[2],
            d: v[3],
            pi: v[4],
            varsigma: v[5],
            gamma: v[6],
            delta: v[7],
        }
    }

    pub fn agent(&self) -> AgentProblem {
        let ScalarCoefficients {
            a,
            b,
            c,
            d,
            pi,
            varsigma,
            gamma,
            delta,
        } = *self;
        AgentProblem::builder(1)
            .objective(
                move |x| a * x[0] * x[0] + b * x[0] + c * softplus(d * x[0]),
                move |x| DVector::from_element(1, 2.0 * a * x[0] + b + c * d * logistic(d * x[0])),
            )
            .inequality(
                1,
                move |x| DVector::from_element(1, pi * x[0] * x[0] + varsigma),
                move |x| DMatrix::from_element(1, 1, 2.0 * pi * x[0]),
            )
            .equality(DMatrix::from_element(1, 1, gamma), DVector::from_element(1, delta))
            .local_set(LocalSet::Box {
                lower: DVector::from_element(1, -1.0),
                upper: DVector::from_element(1, 1.0),
            })
            .build()
            .expect("scalar benchmark agent is well formed")
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct ScalarInstance {
    pub seed: u64,
    /// Redraw round that produced a feasible instance.
    pub attempt: u32,
    pub coefficients: Vec<ScalarCoefficients>,
    pub problem: ProblemSpec,
}

impl ScalarInstance {
    pub fn tag(&self) -> String {
        format!(
            "scalar-benchmark:seed={}:n={}:attempt={}",
            self.seed,
            self.coefficients.len(),
            self.attempt
        )
    }
}

/// Feasibility probe. The equality must be solvable with every `x_i`
/// inside `[−(1 − m), 1 − m]` for the margin `m` = [`SLATER_MARGIN`], which
/// rules out draws whose feasible set is nearly a single vertex. Then a grid
/// scan of `[−1, 1]^N` at spacing 0.1 for `N ≤ 3`, or a relaxed centralized
/// solve otherwise.
fn probe_feasible(coeffs: &[ScalarCoefficients], problem: &ProblemSpec) -> bool {
    let reach: f64 = coeffs.iter().map(|c| c.gamma.abs()).sum();
    let offset: f64 = coeffs.iter().map(|c| c.delta).sum();
    if offset.abs() > (1.0 - SLATER_MARGIN) * reach {
        return false;
    }
    if coeffs.len() <= GRID_MAX_DIM {
        return grid_oracle(problem, 0.1).is_ok();
    }
    let cfg = OracleConfig {
        tol: 1e-6,
        max_iters: 100_000,
        seed: 0,
    };
    centralized_solve(problem, &cfg).is_ok()
}

/// Random instance of the scalar benchmark with `n` agents. Infeasible draws
/// are rejected and redrawn on a fresh key.
pub fn generate_scalar_instance(seed: u64, n: usize) -> Result<ScalarInstance, HarnessError> {
    if n < 2 {
        return Err(HarnessError::Config(format!(
            "benchmark needs at least 2 agents, got {n}"
        )));
    }
    for attempt in 0..MAX_INSTANCE_ATTEMPTS {
        let coefficients: Vec<_> = (0..n).map(|i| ScalarCoefficients::draw(seed, attempt, i)).collect();
        let problem = ProblemSpec::new(coefficients.iter().map(ScalarCoefficients::agent).collect())?;
        if probe_feasible(&coefficients, &problem) {
            return Ok(ScalarInstance {
                seed,
                attempt,
                coefficients,
                problem,
            });
        }
        log::info!("seed {seed}: draw {attempt} failed the feasibility probe, redrawing");
    }
    Err(HarnessError::InfeasibleInstance(MAX_INSTANCE_ATTEMPTS))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub graph: GraphConfig,
    pub solver: SolverSection,
    #[serde(default)]
    pub oracle: OracleSection,
    pub output: OutputSection,
    #[serde(default)]
    pub comparison: ComparisonSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// The randomized scalar benchmark.
    Benchmark {
        seed: Option<u64>,
        n_agents: usize,
        #[serde(default)]
        slater_point: Option<Vec<f64>>,
    },
    /// Separable quadratics with affine coupled constraints.
    Quadratic {
        agents: Vec<QuadraticAgent>,
        #[serde(default)]
        slater_point: Option<Vec<f64>>,
    },
}

/// `f(x) = ½ Σ_j h_j x_j² + cᵀx`, `g(x) = G x + g0`, `h(x) = B x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticAgent {
    pub hessian_diag: Vec<f64>,
    pub linear: Vec<f64>,
    #[serde(default)]
    pub ineq_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub ineq_offset: Vec<f64>,
    #[serde(default)]
    pub eq_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub eq_offset: Vec<f64>,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// Cycle over this many agents.
    pub ring: Option<usize>,
    /// Undirected edges `[i, j, weight]` with 1-based agent indices.
    pub edges: Option<Vec<(usize, usize, f64)>>,
    pub n_agents: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub stop_tol: f64,
    #[serde(default)]
    pub kappa_override: Option<f64>,
    pub threshold: ThresholdKind,
    /// Per-agent overrides, 1-based agent index.
    #[serde(default)]
    pub threshold_overrides: Vec<(usize, ThresholdKind)>,
}

fn default_max_iters() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub tol: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iters: 500_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "one")]
    pub decimation: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSection {
    pub modes: Vec<Mode>,
    /// Objective-gap level at which communication counts are compared.
    pub accuracy: f64,
}

impl Default for ComparisonSection {
    fn default() -> Self {
        Self {
            modes: vec![Mode::EventTriggered],
            accuracy: 1e-10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The benchmark experiment with the reference settings: ring graph,
    /// `α = 0.15`, `β = 1.2`, `ε_{i,k} = 10 e^{−0.01(k+1)}`, both modes.
    pub fn benchmark(seed: u64, n_agents: usize, out_dir: PathBuf) -> Self {
        Self {
            problem: ProblemConfig::Benchmark {
                seed: Some(seed),
                n_agents,
                slater_point: None,
            },
            graph: GraphConfig {
                ring: Some(n_agents),
                edges: None,
                n_agents: None,
            },
            solver: SolverSection {
                alpha: 0.15,
                beta: 1.2,
                max_iters: 20_000,
                stop_tol: 0.0,
                kappa_override: None,
                threshold: ThresholdKind::Exponential { c0: 10.0, rate: 0.01 },
                threshold_overrides: Vec::new(),
            },
            oracle: OracleSection::default(),
            output: OutputSection {
                dir: out_dir,
                decimation: 1,
            },
            comparison: ComparisonSection {
                modes: vec![Mode::EventTriggered, Mode::Periodic],
                accuracy: 1e-10,
            },
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let n = match &self.problem {
            ProblemConfig::Benchmark { seed, n_agents, .. } => {
                if seed.is_none() {
                    return bad("benchmark problem requires a seed".into());
                }
                *n_agents
            }
            ProblemConfig::Quadratic { agents, .. } => agents.len(),
        };
        match (&self.graph.ring, &self.graph.edges) {
            (Some(r), None) if *r != n => return bad(format!("ring has {r} agents but problem has {n}")),
            (Some(_), Some(_)) => return bad("graph: give either `ring` or `edges`, not both".into()),
            (None, None) => return bad("graph: one of `ring` or `edges` is required".into()),
            (None, Some(_)) => {
                if let Some(gn) = self.graph.n_agents {
                    if gn != n {
                        return bad(format!("graph has {gn} agents but problem has {n}"));
                    }
                }
            }
            _ => {}
        }
        if self.comparison.modes.is_empty() {
            return bad("comparison.modes must list at least one mode".into());
        }
        for (i, m) in self.comparison.modes.iter().enumerate() {
            if self.comparison.modes[..i].contains(m) {
                return bad(format!("mode {} listed twice; output paths would collide", m.as_str()));
            }
        }
        if !(self.comparison.accuracy > 0.0) {
            return bad("comparison.accuracy must be positive".into());
        }
        if !(self.oracle.tol > 0.0) || self.oracle.max_iters == 0 {
            return bad("oracle needs tol > 0 and max_iters >= 1".into());
        }
        for (agent, _) in &self.solver.threshold_overrides {
            if *agent == 0 || *agent > n {
                return bad(format!("threshold override for agent {agent} outside 1..={n}"));
            }
        }
        self.solver_config(Mode::EventTriggered)?.validate()?;
        Ok(())
    }

    pub fn solver_config(&self, mode: Mode) -> Result<SolverConfig, HarnessError> {
        let mut threshold = ThresholdSchedule::new(self.solver.threshold)?;
        for (agent, kind) in &self.solver.threshold_overrides {
            threshold = threshold.with_override(agent.saturating_sub(1), *kind)?;
        }
        Ok(SolverConfig {
            alpha: self.solver.alpha,
            beta: self.solver.beta,
            threshold,
            mode,
            max_iters: self.solver.max_iters,
            stop_tol: self.solver.stop_tol,
            kappa_override: self.solver.kappa_override,
            trace_every: self.output.decimation,
        })
    }

    pub fn build_graph(&self) -> Result<NetworkGraph, HarnessError> {
        if let Some(n) = self.graph.ring {
            return Ok(NetworkGraph::ring(n)?);
        }
        let edges = self.graph.edges.as_deref().unwrap_or_default();
        let n = self.graph.n_agents.unwrap_or_else(|| self.problem_agent_count());
        let mut zero_based = Vec::with_capacity(edges.len());
        for &(i, j, w) in edges {
            if i == 0 || j == 0 {
                return Err(HarnessError::Config(format!(
                    "edge ({i}, {j}): agent indices start at 1"
                )));
            }
            zero_based.push((i - 1, j - 1, w));
        }
        Ok(NetworkGraph::from_edges(n, &zero_based)?)
    }

    fn problem_agent_count(&self) -> usize {
        match &self.problem {
            ProblemConfig::Benchmark { n_agents, .. } => *n_agents,
            ProblemConfig::Quadratic { agents, .. } => agents.len(),
        }
    }

    /// Problem plus a tag identifying the instance in traces.
    pub fn build_problem(&self) -> Result<(ProblemSpec, String), HarnessError> {
        let (problem, tag, slater) = match &self.problem {
            ProblemConfig::Benchmark {
                seed,
                n_agents,
                slater_point,
            } => {
                let seed = seed.ok_or_else(|| HarnessError::Config("benchmark problem requires a seed".into()))?;
                let inst = generate_scalar_instance(seed, *n_agents)?;
                let tag = inst.tag();
                (inst.problem, tag, slater_point)
            }
            ProblemConfig::Quadratic { agents, slater_point } => {
                let built = agents
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        a.build()
                            .map_err(|e| HarnessError::Config(format!("agent {}: {e}", i + 1)))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let problem = ProblemSpec::new(built)?;
                let tag = format!("quadratic:n={}", problem.n_agents());
                (problem, tag, slater_point)
            }
        };
        if let Some(point) = slater {
            problem
                .check_slater_point(&DVector::from_column_slice(point), 1e-9)
                .map_err(|e| HarnessError::Config(format!("slater_point: {e}")))?;
        }
        Ok((problem, tag))
    }
}

impl QuadraticAgent {
    fn build(&self) -> Result<AgentProblem, ProblemError> {
        let n = self.hessian_diag.len();
        if self.linear.len() != n {
            return Err(ProblemError::DimensionMismatch {
                context: "linear term",
                expected: n,
                got: self.linear.len(),
            });
        }
        let h = DVector::from_vec(self.hessian_diag.clone());
        if h.iter().any(|v| *v < 0.0) {
            return Err(ProblemError::InvalidProblem("hessian_diag must be nonnegative".into()));
        }
        let c = DVector::from_vec(self.linear.clone());
        let (h2, c2) = (h.clone(), c.clone());
        let mut builder = AgentProblem::builder(n).objective(
            move |x| 0.5 * x.component_mul(x).dot(&h) + c.dot(x),
            move |x| x.component_mul(&h2) + &c2,
        );
        if !self.ineq_matrix.is_empty() {
            let g = rows_to_matrix(&self.ineq_matrix, n, "ineq_matrix")?;
            let g0 = DVector::from_vec(self.ineq_offset.clone());
            if g0.len() != g.nrows() {
                return Err(ProblemError::DimensionMismatch {
                    context: "ineq_offset",
                    expected: g.nrows(),
                    got: g0.len(),
                });
            }
            let p = g.nrows();
            let g_jac = g.clone();
            builder = builder.inequality(p, move |x| &g * x + &g0, move |_| g_jac.clone());
        }
        if !self.eq_matrix.is_empty() {
            let b = rows_to_matrix(&self.eq_matrix, n, "eq_matrix")?;
            builder = builder.equality(b, DVector::from_vec(self.eq_offset.clone()));
        }
        let set = match (&self.lower, &self.upper) {
            (None, None) => LocalSet::WholeSpace,
            (lower, upper) => LocalSet::boxed(
                lower.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n]),
                upper.clone().unwrap_or_else(|| vec![f64::INFINITY; n]),
            )?,
        };
        builder.local_set(set).build()
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize, context: &'static str) -> Result<DMatrix<f64>, ProblemError> {
    for r in rows {
        if r.len() != cols {
            return Err(ProblemError::DimensionMismatch {
                context,
                expected: cols,
                got: r.len(),
            });
        }
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().copied(),
    ))
}

// ---------------------------------------------------------------------------
// Runs and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub trace_path: PathBuf,
    pub state_path: PathBuf,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_objective: f64,
    pub final_objective_gap: f64,
    pub final_constraint_violation: f64,
    pub final_dual_consensus: f64,
    pub final_fixed_point_residual: f64,
    pub final_certificate: KktCertificate,
    pub communication: CommSummary,
    /// `max t·gap / (t·gap at t = 100)` over `t ∈ [100, 5000]`.
    pub rate_growth: Option<f64>,
    /// `t · |F(ξ̂_t) − f*|` sampled every 100 iterations.
    pub rate_series: Vec<ErgodicPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub objective: f64,
    pub x: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub certificate: KktCertificate,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub instance: String,
    pub n_agents: usize,
    pub lambda_max: f64,
    pub kappa_c: f64,
    pub kappa_source: &'static str,
    pub step_sizes: StepSizeReport,
    pub warnings: Vec<String>,
    pub oracle: OracleReport,
    pub accuracy: f64,
    pub modes: Vec<ModeReport>,
    /// `1 − C_s(event) / C_s(periodic)` at the comparison accuracy.
    pub reduction_vs_periodic: Option<f64>,
}

/// Final iterate of a run, as written next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub instance: String,
    pub mode: Mode,
    pub iter: usize,
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub trigger_counts: Vec<u64>,
}

impl FinalState {
    fn capture(state: &SolverState, instance: &str) -> Self {
        let to_vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
        Self {
            instance: instance.to_string(),
            mode: state.config().mode,
            iter: state.iter(),
            x: state.agents().iter().map(|a| to_vec(&a.x)).collect(),
            lambda: state.agents().iter().map(|a| to_vec(&a.lam)).collect(),
            s: state.agents().iter().map(|a| to_vec(&a.s)).collect(),
            trigger_counts: state.trigger_counts(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// KKT certificate of the stored iterate with `λ₀` taken as the mean of
    /// the agents' multipliers.
    pub fn certify(&self, problem: &ProblemSpec) -> Result<KktCertificate, HarnessError> {
        let x = DVector::from_iterator(self.x.iter().map(Vec::len).sum(), self.x.iter().flatten().copied());
        let m = problem.m();
        let mut lambda0 = DVector::zeros(m);
        for l in &self.lambda {
            if l.len() != m {
                return Err(HarnessError::Config(format!(
                    "state multiplier length {} != {m}",
                    l.len()
                )));
            }
            lambda0 += DVector::from_column_slice(l);
        }
        lambda0 /= self.lambda.len().max(1) as f64;
        Ok(kkt_residuals(problem, &x, &lambda0)?)
    }
}

pub fn trace_file_name(mode: Mode) -> String {
    format!("trace_{}.csv", mode.as_str())
}

pub fn state_file_name(mode: Mode) -> String {
    format!("final_{}.json", mode.as_str())
}

pub const REPORT_FILE: &str = "report.json";

/// Everything one mode produces, before it is written out.
pub struct ModeRun {
    pub trace: RunTrace,
    pub state: SolverState,
    pub stop_reason: StopReason,
}

/// Run one mode of an experiment from the zero initial state.
pub fn run_mode(
    problem: Arc<ProblemSpec>,
    graph: Arc<NetworkGraph>,
    config: SolverConfig,
    f_star: Option<f64>,
    tag: &str,
) -> Result<ModeRun, HarnessError> {
    let stop = StopRule::from_config(&config);
    let mut state = SolverState::zero_start(problem, graph, config)?;
    let (trace, stop_reason) = run(&mut state, stop, f_star, tag)?;
    Ok(ModeRun {
        trace,
        state,
        stop_reason,
    })
}

fn write_file(
    path: &Path,
    f: impl FnOnce(BufWriter<fs::File>) -> Result<(), HarnessError>,
) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f(BufWriter::new(file))
}

/// Build problem and graph, certify a reference optimum, run each requested
/// mode and write traces, final states and a JSON report to the output
/// directory, which must already exist.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let out_dir = &config.output.dir;
    if !out_dir.is_dir() {
        return Err(HarnessError::io(
            out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }

    let (problem, tag) = config.build_problem()?;
    let problem = Arc::new(problem);
    let graph = Arc::new(config.build_graph()?);
    if graph.n_agents() != problem.n_agents() {
        return Err(HarnessError::Config(format!(
            "graph has {} agents but problem has {}",
            graph.n_agents(),
            problem.n_agents()
        )));
    }

    let oracle_cfg = OracleConfig {
        tol: config.oracle.tol,
        max_iters: config.oracle.max_iters,
        seed: config.oracle.seed,
    };
    let oracle = centralized_solve(&problem, &oracle_cfg)?;
    let f_star = oracle.objective;
    log::info!("oracle f* = {f_star:.15e} after {} iterations", oracle.iterations);

    let mut warnings = Vec::new();
    let (kappa_c, kappa_source) = match config.solver.kappa_override {
        Some(k) => (k, "override"),
        None => {
            // Sample around the zero initial iterate.
            let probe = SolverState::zero_start(
                Arc::clone(&problem),
                Arc::clone(&graph),
                config.solver_config(Mode::Periodic)?,
            )?;
            let mut center = probe.x_stacked().iter().copied().collect::<Vec<_>>();
            center.extend(probe.lambda_stacked().iter());
            let region = SampleRegion::around(&DVector::from_vec(center), KAPPA_REGION_HALF_WIDTH);
            (
                estimate_kappa(&problem, &region, KAPPA_SAMPLES, config.oracle.seed)?,
                "sampled",
            )
        }
    };
    let step_sizes = validate_step_sizes(config.solver.alpha, config.solver.beta, kappa_c, graph.lambda_max());
    if !step_sizes.ok {
        let msg = format!(
            "step sizes outside the sufficient bounds for kappa_c = {kappa_c:.4} ({kappa_source}): \
             need alpha < {:.4} and beta <= {:.4}; running anyway",
            step_sizes.alpha_bound, step_sizes.beta_bound
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let accuracy = config.comparison.accuracy;
    let mut runs = Vec::new();
    for &mode in &config.comparison.modes {
        let run = run_mode(
            Arc::clone(&problem),
            Arc::clone(&graph),
            config.solver_config(mode)?,
            Some(f_star),
            &tag,
        )?;
        runs.push(run);
    }

    let periodic = runs.iter().find(|r| r.trace.mode() == Mode::Periodic);
    let mut modes = Vec::new();
    let mut reduction_vs_periodic = None;
    for run in &runs {
        let mode = run.trace.mode();
        let trace_path = out_dir.join(trace_file_name(mode));
        let state_path = out_dir.join(state_file_name(mode));
        write_file(&trace_path, |w| Ok(run.trace.write_csv(w)?))?;
        let final_state = FinalState::capture(&run.state, &tag);
        write_file(&state_path, |w| {
            serde_json::to_writer_pretty(w, &final_state)
                .map_err(|e| HarnessError::io(&state_path, std::io::Error::other(e)))
        })?;

        let baseline = periodic.filter(|_| mode == Mode::EventTriggered).map(|p| &p.trace);
        let communication = comm_summary(&run.trace, baseline, Some(accuracy))?;
        if baseline.is_some() {
            reduction_vs_periodic = communication.reduction;
        }
        let series = ergodic_gap_series(&run.trace, &problem, Some(f_star))?;
        let rate_growth = scaled_gap_growth(&series, RATE_WINDOW.0, RATE_WINDOW.1);
        let last = run.trace.last();
        modes.push(ModeReport {
            mode,
            trace_path,
            state_path,
            iterations: run.state.iter(),
            stop_reason: run.stop_reason,
            final_objective: last.map_or(f64::NAN, |r| r.objective),
            final_objective_gap: last.and_then(|r| r.objective_gap).unwrap_or(f64::NAN),
            final_constraint_violation: last.map_or(f64::NAN, |r| r.constraint_violation),
            final_dual_consensus: run.state.dual_consensus(),
            final_fixed_point_residual: last.map_or(f64::NAN, |r| r.fixed_point_residual),
            final_certificate: final_state.certify(&problem)?,
            communication,
            rate_growth,
            rate_series: series.into_iter().filter(|p| p.t % 100 == 0).collect(),
        });
    }

    let report = ExperimentReport {
        instance: tag,
        n_agents: problem.n_agents(),
        lambda_max: graph.lambda_max(),
        kappa_c,
        kappa_source,
        step_sizes,
        warnings,
        oracle: OracleReport {
            objective: f_star,
            x: oracle.x.iter().copied().collect(),
            lambda0: oracle.lambda0.iter().copied().collect(),
            certificate: oracle.certificate,
            iterations: oracle.iterations,
        },
        accuracy,
        modes,
        reduction_vs_periodic,
    };
    let report_path = out_dir.join(REPORT_FILE);
    write_file(&report_path, |w| {
        serde_json::to_writer_pretty(w, &report).map_err(|e| HarnessError::io(&report_path, std::io::Error::other(e)))
    })?;
    Ok(report)
}
