//! Problem data: per-agent objectives, coupled constraint functions,
//! local sets, projections, and the stacked saddle operator.
//!
//! Each agent `i` owns a private variable `x_i ∈ R^{n_i}` and contributes
//! `psi_i(x_i) = [g_i(x_i); B_i x_i + b_i] ∈ R^{p+q}` to the coupled
//! constraint `sum_i psi_i(x_i) ∈ R^p_{≤0} × {0}^q`. Dual variables live in
//! the cone `R^p_{≥0} × R^q`.
//!
//! User-supplied closures must be pure: the solver may evaluate them from
//! several threads and in any order.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Step used by the central-difference fallback derivatives.
pub const FD_STEP: f64 = 1e-6;

/// Multiplier applied to the sampled Lipschitz ratio.
pub const KAPPA_SAFETY_FACTOR: f64 = 1.5;

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid local set: {0}")]
    InvalidSet(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("degenerate sampling region: {0}")]
    DegenerateRegion(String),
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<(), ProblemError> {
    if expected == got {
        Ok(())
    } else {
        Err(ProblemError::DimensionMismatch { context, expected, got })
    }
}

/// Closed convex local constraint set `Ω_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalSet {
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Ball {
        center: DVector<f64>,
        radius: f64,
    },
    /// `{ x : normal · x ≤ offset }`
    Halfspace {
        normal: DVector<f64>,
        offset: f64,
    },
    WholeSpace,
}

impl LocalSet {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ProblemError> {
        let set = LocalSet::Box {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        };
        set.validate()?;
        Ok(set)
    }

    /// Box `[lower, upper]^dim`.
    pub fn uniform_box(dim: usize, lower: f64, upper: f64) -> Result<Self, ProblemError> {
        Self::boxed(vec![lower; dim], vec![upper; dim])
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, ProblemError> {
        let set = LocalSet::Ball {
            center: DVector::from_vec(center),
            radius,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn halfspace(normal: Vec<f64>, offset: f64) -> Result<Self, ProblemError> {
        let set = LocalSet::Halfspace {
            normal: DVector::from_vec(normal),
            offset,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        match self {
            LocalSet::Box { lower, upper } => {
                check_len("box bounds", lower.len(), upper.len())?;
                if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
                    return Err(ProblemError::InvalidSet("box requires lower <= upper".into()));
                }
            }
            LocalSet::Ball { radius, center } => {
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(ProblemError::InvalidSet("ball radius must be positive".into()));
                }
                if center.iter().any(|c| !c.is_finite()) {
                    return Err(ProblemError::InvalidSet("ball center must be finite".into()));
                }
            }
            LocalSet::Halfspace { normal, offset } => {
                if normal.norm() == 0.0 || !offset.is_finite() {
                    return Err(ProblemError::InvalidSet("halfspace needs a nonzero normal".into()));
                }
            }
            LocalSet::WholeSpace => {}
        }
        Ok(())
    }

    /// Dimension fixed by the set's data, `None` for the whole space.
    pub fn dim(&self) -> Option<usize> {
        match self {
            LocalSet::Box { lower, .. } => Some(lower.len()),
            LocalSet::Ball { center, .. } => Some(center.len()),
            LocalSet::Halfspace { normal, .. } => Some(normal.len()),
            LocalSet::WholeSpace => None,
        }
    }

    pub fn is_bounded_box(&self) -> bool {
        matches!(self, LocalSet::Box { lower, upper }
            if lower.iter().chain(upper.iter()).all(|v| v.is_finite()))
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<(), ProblemError> {
        match self.dim() {
            Some(d) => check_len("local set", d, x.len()),
            None => Ok(()),
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        self.check_dim(x)?;
        Ok(match self {
            LocalSet::Box { lower, upper } => DVector::from_fn(x.len(), |i, _| x[i].max(lower[i]).min(upper[i])),
            LocalSet::Ball { center, radius } => {
                let offset = x - center;
                let dist = offset.norm();
                if dist <= *radius {
                    x.clone()
                } else {
                    center + offset * (*radius / dist)
                }
            }
            LocalSet::Halfspace { normal, offset } => {
                let excess = normal.dot(x) - offset;
                if excess <= 0.0 {
                    x.clone()
                } else {
                    x - normal * (excess / normal.norm_squared())
                }
            }
            LocalSet::WholeSpace => x.clone(),
        })
    }

    /// Membership with an absolute tolerance.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        if self.check_dim(x).is_err() {
            return false;
        }
        match self {
            LocalSet::Box { lower, upper } => (0..x.len()).all(|i| x[i] >= lower[i] - tol && x[i] <= upper[i] + tol),
            LocalSet::Ball { center, radius } => (x - center).norm() <= radius + tol,
            LocalSet::Halfspace { normal, offset } => normal.dot(x) <= offset + tol,
            LocalSet::WholeSpace => x.iter().all(|v| v.is_finite()),
        }
    }
}

impl LocalSet {
    /// Membership in the relative interior.
    pub fn contains_strictly(&self, x: &DVector<f64>) -> bool {
        if self.check_dim(x).is_err() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            LocalSet::Box { lower, upper } => (0..x.len()).all(|i| {
                if lower[i] == upper[i] {
                    x[i] == lower[i]
                } else {
                    x[i] > lower[i] && x[i] < upper[i]
                }
            }),
            LocalSet::Ball { center, radius } => (x - center).norm() < *radius,
            LocalSet::Halfspace { normal, offset } => normal.dot(x) < *offset,
            LocalSet::WholeSpace => true,
        }
    }
}

/// Projection onto `R^p_{≥0} × R^q`: the first `p` entries are clamped at
/// zero, the trailing `q` entries pass through.
pub fn project_dual_cone(p: usize, q: usize, lambda: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
    check_len("dual cone", p + q, lambda.len())?;
    let mut out = lambda.clone();
    for v in out.rows_mut(0, p).iter_mut() {
        *v = v.max(0.0);
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, step: f64) -> DVector<f64> {
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |j, _| {
        let orig = probe[j];
        probe[j] = orig + step;
        let up = f(&probe);
        probe[j] = orig - step;
        let down = f(&probe);
        probe[j] = orig;
        (up - down) / (2.0 * step)
    })
}

/// Central-difference Jacobian (`rows × x.len()`) of a vector function.
pub fn fd_jacobian(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    rows: usize,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + step;
        let up = f(&probe);
        probe[j] = orig - step;
        let down = f(&probe);
        probe[j] = orig;
        jac.set_column(j, &((up - down) / (2.0 * step)));
    }
    jac
}

/// One agent's private data.
#[derive(Clone)]
pub struct AgentProblem {
    dim: usize,
    ineq_dim: usize,
    objective: ScalarFn,
    gradient: VectorFn,
    ineq: VectorFn,
    ineq_jacobian: MatrixFn,
    eq_matrix: DMatrix<f64>,
    eq_offset: DVector<f64>,
    local_set: LocalSet,
    approximate_derivatives: bool,
}

impl fmt::Debug for AgentProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentProblem")
            .field("dim", &self.dim)
            .field("p", &self.ineq_dim)
            .field("q", &self.eq_matrix.nrows())
            .field("local_set", &self.local_set)
            .field("approximate_derivatives", &self.approximate_derivatives)
            .finish_non_exhaustive()
    }
}

impl AgentProblem {
    pub fn builder(dim: usize) -> AgentProblemBuilder {
        AgentProblemBuilder {
            dim,
            objective: None,
            ineq: None,
            eq: None,
            local_set: LocalSet::WholeSpace,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> usize {
        self.ineq_dim
    }

    pub fn q(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn m(&self) -> usize {
        self.p() + self.q()
    }

    pub fn local_set(&self) -> &LocalSet {
        &self.local_set
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq_matrix
    }

    pub fn eq_offset(&self) -> &DVector<f64> {
        &self.eq_offset
    }

    /// True when some derivative comes from finite differences.
    pub fn uses_approximate_derivatives(&self) -> bool {
        self.approximate_derivatives
    }

    pub fn objective(&self, x: &DVector<f64>) -> Result<f64, ProblemError> {
        check_len("objective", self.dim, x.len())?;
        Ok((self.objective)(x))
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        check_len("gradient", self.dim, x.len())?;
        Ok((self.gradient)(x))
    }

    pub fn ineq(&self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        check_len("inequality", self.dim, x.len())?;
        Ok((self.ineq)(x))
    }

    /// `psi_i(x_i) = [g_i(x_i); B_i x_i + b_i]`.
    pub fn psi(&self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        check_len("psi", self.dim, x.len())?;
        let g = (self.ineq)(x);
        let h = &self.eq_matrix * x + &self.eq_offset;
        let mut out = DVector::zeros(self.m());
        out.rows_mut(0, self.p()).copy_from(&g);
        out.rows_mut(self.p(), self.q()).copy_from(&h);
        Ok(out)
    }

    /// `[∇g_i(x_i); B_i]`, an `m × n_i` matrix.
    pub fn psi_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ProblemError> {
        check_len("psi jacobian", self.dim, x.len())?;
        let mut jac = DMatrix::zeros(self.m(), self.dim);
        if self.p() > 0 {
            jac.rows_mut(0, self.p()).copy_from(&(self.ineq_jacobian)(x));
        }
        jac.rows_mut(self.p(), self.q()).copy_from(&self.eq_matrix);
        Ok(jac)
    }

    /// `∇f_i(x_i) + ∇psi_i(x_i)^T λ_i`.
    pub fn lagrangian_gradient(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        check_len("multiplier", self.m(), lambda.len())?;
        Ok(self.gradient(x)? + self.psi_jacobian(x)?.transpose() * lambda)
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        check_len("projection", self.dim, x.len())?;
        self.local_set.project(x)
    }
}

pub struct AgentProblemBuilder {
    dim: usize,
    objective: Option<(ScalarFn, Option<VectorFn>)>,
    ineq: Option<(usize, VectorFn, Option<MatrixFn>)>,
    eq: Option<(DMatrix<f64>, DVector<f64>)>,
    local_set: LocalSet,
}

impl AgentProblemBuilder {
    /// Objective with its analytic gradient.
    pub fn objective<F, G>(mut self, f: F, grad: G) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.objective = Some((Arc::new(f), Some(Arc::new(grad))));
        self
    }

    /// Objective whose gradient is taken by central differences. Slow and
    /// approximate; prefer [`objective`](Self::objective).
    pub fn objective_fd<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        self.objective = Some((Arc::new(f), None));
        self
    }

    /// Coupled inequality block `g_i: R^{n_i} -> R^p` with its Jacobian.
    pub fn inequality<G, J>(mut self, p: usize, g: G, jac: J) -> Self
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.ineq = Some((p, Arc::new(g), Some(Arc::new(jac))));
        self
    }

    pub fn inequality_fd<G>(mut self, p: usize, g: G) -> Self
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.ineq = Some((p, Arc::new(g), None));
        self
    }

    /// Affine coupled equality block `h_i(x) = B x + b`.
    pub fn equality(mut self, matrix: DMatrix<f64>, offset: DVector<f64>) -> Self {
        self.eq = Some((matrix, offset));
        self
    }

    pub fn local_set(mut self, set: LocalSet) -> Self {
        self.local_set = set;
        self
    }

    pub fn build(self) -> Result<AgentProblem, ProblemError> {
        let dim = self.dim;
        if dim == 0 {
            return Err(ProblemError::InvalidProblem("agent dimension must be positive".into()));
        }
        self.local_set.validate()?;
        if let Some(d) = self.local_set.dim() {
            check_len("local set", dim, d)?;
        }
        let mut approximate = false;

        let (objective, gradient): (ScalarFn, VectorFn) = match self.objective {
            Some((f, Some(g))) => (f, g),
            Some((f, None)) => {
                approximate = true;
                let inner = f.clone();
                (f, Arc::new(move |x: &DVector<f64>| fd_gradient(&*inner, x, FD_STEP)))
            }
            None => (
                Arc::new(|_: &DVector<f64>| 0.0),
                Arc::new(move |_: &DVector<f64>| DVector::zeros(dim)),
            ),
        };

        let (ineq_dim, ineq, ineq_jacobian): (usize, VectorFn, MatrixFn) = match self.ineq {
            Some((p, g, Some(j))) => (p, g, j),
            Some((p, g, None)) => {
                approximate = true;
                let inner = g.clone();
                (
                    p,
                    g,
                    Arc::new(move |x: &DVector<f64>| fd_jacobian(&*inner, p, x, FD_STEP)),
                )
            }
            None => (
                0,
                Arc::new(|_: &DVector<f64>| DVector::zeros(0)),
                Arc::new(move |_: &DVector<f64>| DMatrix::zeros(0, dim)),
            ),
        };

        let (eq_matrix, eq_offset) = self.eq.unwrap_or_else(|| (DMatrix::zeros(0, dim), DVector::zeros(0)));
        check_len("equality matrix columns", dim, eq_matrix.ncols())?;
        check_len("equality offset", eq_matrix.nrows(), eq_offset.len())?;

        Ok(AgentProblem {
            dim,
            ineq_dim,
            objective,
            gradient,
            ineq,
            ineq_jacobian,
            eq_matrix,
            eq_offset,
            local_set: self.local_set,
            approximate_derivatives: approximate,
        })
    }
}

/// The full coupled problem: `min sum_i f_i(x_i)` over `x ∈ Ω` subject to
/// `sum_i g_i(x_i) ≤ 0` and `sum_i h_i(x_i) = 0`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    agents: Vec<AgentProblem>,
    p: usize,
    q: usize,
    offsets: Vec<usize>,
}

impl ProblemSpec {
    pub fn new(agents: Vec<AgentProblem>) -> Result<Self, ProblemError> {
        let first = agents
            .first()
            .ok_or_else(|| ProblemError::InvalidProblem("at least one agent required".into()))?;
        let (p, q) = (first.p(), first.q());
        for a in &agents {
            check_len("inequality dimension p", p, a.p())?;
            check_len("equality dimension q", q, a.q())?;
        }
        let mut offsets = Vec::with_capacity(agents.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for a in &agents {
            acc += a.dim();
            offsets.push(acc);
        }
        Ok(Self { agents, p, q, offsets })
    }

    pub fn agents(&self) -> &[AgentProblem] {
        &self.agents
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn m(&self) -> usize {
        self.p + self.q
    }

    /// Total primal dimension `n = sum_i n_i`.
    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Dimension of the stacked `ξ = (x; λ)` with one multiplier per agent.
    pub fn stacked_dim(&self) -> usize {
        self.total_dim() + self.n_agents() * self.m()
    }

    /// Split a stacked primal vector into per-agent blocks.
    pub fn split_primal(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>, ProblemError> {
        check_len("stacked primal", self.total_dim(), x.len())?;
        Ok(self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| x.rows(self.offsets[i], a.dim()).into_owned())
            .collect())
    }

    /// Split a stacked multiplier vector (length `N m`) into per-agent blocks.
    pub fn split_dual(&self, lambda: &DVector<f64>) -> Result<Vec<DVector<f64>>, ProblemError> {
        let m = self.m();
        check_len("stacked multipliers", self.n_agents() * m, lambda.len())?;
        Ok((0..self.n_agents())
            .map(|i| lambda.rows(i * m, m).into_owned())
            .collect())
    }

    pub fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
        let len = blocks.iter().map(|b| b.len()).sum();
        let mut out = DVector::zeros(len);
        let mut at = 0;
        for b in blocks {
            out.rows_mut(at, b.len()).copy_from(b);
            at += b.len();
        }
        out
    }

    pub fn objective(&self, x: &DVector<f64>) -> Result<f64, ProblemError> {
        let xs = self.split_primal(x)?;
        self.objective_blocks(&xs)
    }

    pub fn objective_blocks(&self, xs: &[DVector<f64>]) -> Result<f64, ProblemError> {
        check_len("agent blocks", self.n_agents(), xs.len())?;
        self.agents.iter().zip(xs).map(|(a, x)| a.objective(x)).sum()
    }

    /// Aggregate constraint value `psi(x) = sum_i psi_i(x_i)`.
    pub fn coupled_constraint_blocks(&self, xs: &[DVector<f64>]) -> Result<DVector<f64>, ProblemError> {
        check_len("agent blocks", self.n_agents(), xs.len())?;
        let mut total = DVector::zeros(self.m());
        for (a, x) in self.agents.iter().zip(xs) {
            total += a.psi(x)?;
        }
        Ok(total)
    }

    /// `max(max(0, g(x)), ‖h(x)‖_∞)` for the aggregate constraint.
    pub fn constraint_violation_blocks(&self, xs: &[DVector<f64>]) -> Result<f64, ProblemError> {
        let psi = self.coupled_constraint_blocks(xs)?;
        Ok(self.violation_of(&psi))
    }

    pub fn violation_of(&self, psi: &DVector<f64>) -> f64 {
        let ineq = psi.rows(0, self.p).iter().fold(0.0_f64, |acc, v| acc.max(*v));
        let eq = psi.rows(self.p, self.q).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        ineq.max(eq)
    }

    /// The stacked saddle operator
    /// `Φ(x, λ) = [∇f(x) + ∇ψ̃(x)^T λ; -ψ̃(x)]` with a block-diagonal
    /// Jacobian and one multiplier block per agent.
    pub fn phi(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        let xs = self.split_primal(x)?;
        let ls = self.split_dual(lambda)?;
        let mut top = Vec::with_capacity(xs.len());
        let mut bottom = Vec::with_capacity(xs.len());
        for ((a, xi), li) in self.agents.iter().zip(&xs).zip(&ls) {
            top.push(a.lagrangian_gradient(xi, li)?);
            bottom.push(-a.psi(xi)?);
        }
        top.extend(bottom);
        Ok(Self::stack(&top))
    }

    /// Check a Slater point: every block strictly inside its local set,
    /// coupled inequalities strictly negative, equalities within `eq_tol`.
    pub fn check_slater_point(&self, x: &DVector<f64>, eq_tol: f64) -> Result<(), ProblemError> {
        let xs = self.split_primal(x)?;
        for (i, (a, xi)) in self.agents.iter().zip(&xs).enumerate() {
            if !a.local_set().contains_strictly(xi) {
                return Err(ProblemError::InvalidProblem(format!(
                    "block {i} is not in the relative interior of its local set"
                )));
            }
        }
        let psi = self.coupled_constraint_blocks(&xs)?;
        if let Some(v) = psi.rows(0, self.p).iter().find(|v| **v >= 0.0) {
            return Err(ProblemError::InvalidProblem(format!(
                "coupled inequality not strict: {v:e}"
            )));
        }
        if let Some(v) = psi.rows(self.p, self.q).iter().find(|v| v.abs() > eq_tol) {
            return Err(ProblemError::InvalidProblem(format!("coupled equality residual {v:e}")));
        }
        Ok(())
    }

    /// `Φ` on a single stacked vector `ξ = (x; λ)`.
    pub fn phi_stacked(&self, xi: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        check_len("stacked xi", self.stacked_dim(), xi.len())?;
        let n = self.total_dim();
        self.phi(&xi.rows(0, n).into_owned(), &xi.rows(n, xi.len() - n).into_owned())
    }
}

/// Axis-aligned box used to sample operator Lipschitz ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRegion {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl SampleRegion {
    pub fn around(center: &DVector<f64>, half_width: f64) -> Self {
        Self {
            lower: center.map(|c| c - half_width),
            upper: center.map(|c| c + half_width),
        }
    }

    fn validate(&self) -> Result<(), ProblemError> {
        check_len("region bounds", self.lower.len(), self.upper.len())?;
        let mut any_width = false;
        for (l, u) in self.lower.iter().zip(self.upper.iter()) {
            if !l.is_finite() || !u.is_finite() {
                return Err(ProblemError::DegenerateRegion("region must be bounded".into()));
            }
            if u < l {
                return Err(ProblemError::DegenerateRegion("upper bound below lower bound".into()));
            }
            any_width |= u > l;
        }
        if !any_width {
            return Err(ProblemError::DegenerateRegion("region has zero volume".into()));
        }
        Ok(())
    }

    /// `count` points drawn uniformly with a seeded generator. The first `k`
    /// points for a given seed do not depend on `count`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                DVector::from_fn(self.lower.len(), |i, _| {
                    let t: f64 = rng.random();
                    self.lower[i] + t * (self.upper[i] - self.lower[i])
                })
            })
            .collect()
    }
}

/// Largest ratio `‖op(a) - op(b)‖ / ‖a - b‖` over all distinct pairs of
/// `points`, without any safety factor. Pairs of identical points are skipped.
pub fn max_lipschitz_ratio<F>(op: F, points: &[DVector<f64>]) -> Result<Option<f64>, ProblemError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, ProblemError>,
{
    let values = points.iter().map(&op).collect::<Result<Vec<_>, _>>()?;
    let mut best: Option<f64> = None;
    for a in 0..points.len() {
        for b in (a + 1)..points.len() {
            let dist = (&points[a] - &points[b]).norm();
            if dist == 0.0 {
                continue;
            }
            let ratio = (&values[a] - &values[b]).norm() / dist;
            best = Some(best.map_or(ratio, |r: f64| r.max(ratio)));
        }
    }
    Ok(best)
}

/// Sampled Lipschitz estimate of an arbitrary operator over `region`,
/// inflated by [`KAPPA_SAFETY_FACTOR`].
pub fn estimate_lipschitz<F>(op: F, region: &SampleRegion, samples: usize, seed: u64) -> Result<f64, ProblemError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, ProblemError>,
{
    region.validate()?;
    let points = region.sample(samples, seed);
    match max_lipschitz_ratio(op, &points)? {
        Some(r) => Ok(KAPPA_SAFETY_FACTOR * r),
        None => Err(ProblemError::DegenerateRegion(format!(
            "no pair of distinct points among {samples} samples"
        ))),
    }
}

/// Estimate of `κ_c`, the Lipschitz constant of [`ProblemSpec::phi`], over
/// a bounded region of `(x, λ)` space. `samples` points are drawn and every
/// pair is compared.
pub fn estimate_kappa(
    spec: &ProblemSpec,
    region: &SampleRegion,
    samples: usize,
    seed: u64,
) -> Result<f64, ProblemError> {
    check_len("region dimension", spec.stacked_dim(), region.lower.len())?;
    estimate_lipschitz(|xi| spec.phi_stacked(xi), region, samples, seed)
}
