//! Centralized reference solutions and KKT certification.
//!
//! The reference solver works on the single-multiplier Lagrangian
//! `f(x) + λ₀ᵀψ(x)` over `Ω × Θ` with a two-evaluation extragradient
//! scheme, which shares no update rule with the distributed iteration.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::problem::{check_len, estimate_lipschitz, project_dual_cone, ProblemError, ProblemSpec, SampleRegion};

/// Largest total dimension the grid oracle will enumerate.
pub const GRID_MAX_DIM: usize = 3;
/// Maximum number of step halvings after divergence.
pub const MAX_HALVINGS: usize = 20;
const DIVERGENCE_NORM: f64 = 1e10;
const KAPPA_SAMPLES: usize = 64;
const KAPPA_HALF_WIDTH: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("no convergence after {iterations} iterations (worst KKT residual {worst:e})")]
    NoConvergence {
        iterations: usize,
        worst: f64,
        certificate: Option<KktCertificate>,
    },
    #[error("grid oracle supports total dimension <= {GRID_MAX_DIM}, got {0}")]
    DimensionTooLarge(usize),
    #[error("grid oracle needs bounded box local sets")]
    UnboundedSet,
    #[error("invalid grid resolution {0}")]
    InvalidResolution(f64),
    #[error("no grid point satisfies the coupled constraints within slack {0:e}")]
    NoFeasiblePoint(f64),
}

/// Residuals of the optimality conditions at `(x, λ₀)`. All are zero at a
/// primal-dual optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktCertificate {
    /// `‖x − P_Ω(x − (∇f(x) + ∇ψ(x)ᵀλ₀))‖`
    pub stationarity_residual: f64,
    /// `max(max(0, g(x)), ‖h(x)‖_∞)`
    pub primal_feasibility: f64,
    /// `max(0, −min λ₀[..p])`
    pub dual_feasibility: f64,
    /// `|λ₀ᵀψ(x)|`
    pub complementarity: f64,
}

impl KktCertificate {
    pub fn worst(&self) -> f64 {
        self.stationarity_residual
            .max(self.primal_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

/// KKT residuals for stacked `x` (length `n`) and a single multiplier
/// `lambda0` (length `m`).
pub fn kkt_residuals(
    problem: &ProblemSpec,
    x: &DVector<f64>,
    lambda0: &DVector<f64>,
) -> Result<KktCertificate, ProblemError> {
    check_len("lambda0", problem.m(), lambda0.len())?;
    let xs = problem.split_primal(x)?;
    let mut stat_sq = 0.0;
    let mut psi = DVector::zeros(problem.m());
    for (agent, xi) in problem.agents().iter().zip(&xs) {
        let grad = agent.lagrangian_gradient(xi, lambda0)?;
        let moved = agent.project(&(xi - grad))?;
        stat_sq += (xi - moved).norm_squared();
        psi += agent.psi(xi)?;
    }
    let p = problem.p();
    let dual = lambda0.rows(0, p).iter().fold(0.0_f64, |acc, v| acc.max(-v));
    Ok(KktCertificate {
        stationarity_residual: stat_sq.sqrt(),
        primal_feasibility: problem.violation_of(&psi),
        dual_feasibility: dual,
        complementarity: lambda0.dot(&psi).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// Seeds the Lipschitz sampling that sets the initial step.
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 200_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x: DVector<f64>,
    pub lambda0: DVector<f64>,
    pub objective: f64,
    pub certificate: KktCertificate,
    pub iterations: usize,
    pub step: f64,
}

/// Single-multiplier saddle operator `G(x, λ₀) = (∇f + ∇ψᵀλ₀; −ψ)`.
fn centralized_operator(problem: &ProblemSpec, z: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
    let n = problem.total_dim();
    let m = problem.m();
    check_len("centralized variable", n + m, z.len())?;
    let lambda0 = z.rows(n, m).into_owned();
    let xs = problem.split_primal(&z.rows(0, n).into_owned())?;
    let mut top = Vec::with_capacity(xs.len());
    let mut psi = DVector::zeros(m);
    for (agent, xi) in problem.agents().iter().zip(&xs) {
        top.push(agent.lagrangian_gradient(xi, &lambda0)?);
        psi += agent.psi(xi)?;
    }
    top.push(-psi);
    Ok(ProblemSpec::stack(&top))
}

fn project_joint(problem: &ProblemSpec, z: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
    let n = problem.total_dim();
    let xs = problem.split_primal(&z.rows(0, n).into_owned())?;
    let mut blocks = problem
        .agents()
        .iter()
        .zip(&xs)
        .map(|(a, x)| a.project(x))
        .collect::<Result<Vec<_>, _>>()?;
    blocks.push(project_dual_cone(
        problem.p(),
        problem.q(),
        &z.rows(n, problem.m()).into_owned(),
    )?);
    Ok(ProblemSpec::stack(&blocks))
}

/// Projected extragradient on `Ω × Θ` from `x = P_Ω(0)`, `λ₀ = 0`, with
/// step `0.5 / κ̂`. The step is halved and the run restarted whenever the
/// iterate blows up. The returned point always passes its own certificate
/// at `config.tol`.
pub fn centralized_solve(problem: &ProblemSpec, config: &OracleConfig) -> Result<OracleSolution, OracleError> {
    let n = problem.total_dim();
    let m = problem.m();
    let x0 = problem
        .agents()
        .iter()
        .map(|a| a.project(&DVector::zeros(a.dim())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut z0 = DVector::zeros(n + m);
    z0.rows_mut(0, n).copy_from(&ProblemSpec::stack(&x0));

    let region = SampleRegion::around(&z0, KAPPA_HALF_WIDTH);
    let kappa = estimate_lipschitz(
        |z| centralized_operator(problem, z),
        &region,
        KAPPA_SAMPLES,
        config.seed,
    )?;
    let mut step = 0.5 / kappa;
    let check_every = 10;
    let mut total_iters = 0;
    let mut last_cert = None;

    for _attempt in 0..=MAX_HALVINGS {
        let mut z = z0.clone();
        let mut diverged = false;
        for it in 1..=config.max_iters {
            let g = centralized_operator(problem, &z)?;
            let mid = project_joint(problem, &(&z - g * step))?;
            let g_mid = centralized_operator(problem, &mid)?;
            z = project_joint(problem, &(&z - g_mid * step))?;
            total_iters += 1;

            let norm = z.norm();
            if !norm.is_finite() || norm > DIVERGENCE_NORM {
                diverged = true;
                break;
            }
            if it % check_every == 0 || it == config.max_iters {
                let x = z.rows(0, n).into_owned();
                let lambda0 = z.rows(n, m).into_owned();
                let cert = kkt_residuals(problem, &x, &lambda0)?;
                last_cert = Some(cert);
                if cert.passes(config.tol) {
                    return Ok(OracleSolution {
                        objective: problem.objective(&x)?,
                        x,
                        lambda0,
                        certificate: cert,
                        iterations: it,
                        step,
                    });
                }
            }
        }
        if !diverged {
            break;
        }
        log::debug!("extragradient diverged with step {step:e}; halving");
        step *= 0.5;
    }
    Err(OracleError::NoConvergence {
        iterations: total_iters,
        worst: last_cert.map_or(f64::INFINITY, |c| c.worst()),
        certificate: last_cert,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub x_best: DVector<f64>,
    pub f_best: f64,
    /// Constraint tolerance applied to grid points.
    pub feasibility_slack: f64,
}

/// Exhaustive search over the product of box local sets at spacing
/// `resolution`. A point is admissible when its coupled-constraint
/// violation is within `resolution/2 · max_j Σ_i ‖∂ψ_{ij}‖₁` over the grid.
/// Relaxed points can undercut `f*` by up to `‖λ*‖₁` times the slack.
pub fn grid_oracle(problem: &ProblemSpec, resolution: f64) -> Result<GridSolution, OracleError> {
    let n = problem.total_dim();
    if n > GRID_MAX_DIM {
        return Err(OracleError::DimensionTooLarge(n));
    }
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(OracleError::InvalidResolution(resolution));
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(n);
    for agent in problem.agents() {
        let crate::problem::LocalSet::Box { lower, upper } = agent.local_set() else {
            return Err(OracleError::UnboundedSet);
        };
        if !agent.local_set().is_bounded_box() {
            return Err(OracleError::UnboundedSet);
        }
        for (l, u) in lower.iter().zip(upper.iter()) {
            let steps = ((u - l) / resolution).round() as usize;
            let mut axis: Vec<f64> = (0..=steps).map(|s| (l + s as f64 * resolution).min(*u)).collect();
            if *axis.last().unwrap() < *u {
                axis.push(*u);
            }
            axes.push(axis);
        }
    }

    // Pass 1: the slack needs the Jacobian bound over the whole grid.
    let mut max_jac = 0.0_f64;
    for_each_grid_point(&axes, |x| {
        let xs = problem.split_primal(x)?;
        let mut row_sums = DVector::<f64>::zeros(problem.m());
        for (agent, xi) in problem.agents().iter().zip(&xs) {
            row_sums += agent.psi_jacobian(xi)?.abs().column_sum();
        }
        max_jac = row_sums.iter().fold(max_jac, |acc, v| acc.max(*v));
        Ok(())
    })?;
    // Half a grid step in every coordinate moves each coupled constraint by at
    // most this much, so the nearest grid point to any feasible point passes.
    let slack = 0.5 * resolution * max_jac;

    // Pass 2: best admissible point. Ties keep the first point in grid order.
    let mut best: Option<(DVector<f64>, f64)> = None;
    for_each_grid_point(&axes, |x| {
        let xs = problem.split_primal(x)?;
        let psi = problem.coupled_constraint_blocks(&xs)?;
        if problem.violation_of(&psi) <= slack {
            let f = problem.objective_blocks(&xs)?;
            if best.as_ref().is_none_or(|(_, fb)| f < *fb) {
                best = Some((x.clone(), f));
            }
        }
        Ok(())
    })?;
    best.map(|(x_best, f_best)| GridSolution {
        x_best,
        f_best,
        feasibility_slack: slack,
    })
    .ok_or(OracleError::NoFeasiblePoint(slack))
}

/// Visit the product of `axes` in lexicographic order through one buffer.
fn for_each_grid_point<F>(axes: &[Vec<f64>], mut visit: F) -> Result<(), OracleError>
where
    F: FnMut(&DVector<f64>) -> Result<(), ProblemError>,
{
    let mut idx = vec![0usize; axes.len()];
    let mut x = DVector::from_iterator(axes.len(), axes.iter().map(|a| a[0]));
    loop {
        visit(&x)?;
        let mut d = axes.len();
        loop {
            if d == 0 {
                return Ok(());
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                x[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            x[d] = axes[d][0];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{AgentProblem, LocalSet};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn shifted_quadratic(set: LocalSet) -> ProblemSpec {
        let agent = AgentProblem::builder(1)
            .objective(|x| 0.5 * (x[0] - 1.0).powi(2), |x| dv(&[x[0] - 1.0]))
            .local_set(set)
            .build()
            .unwrap();
        ProblemSpec::new(vec![agent]).unwrap()
    }

    fn two_agent_budget(set: LocalSet) -> ProblemSpec {
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

    #[test]
    fn kkt_unconstrained_stationary_point() {
        let spec = shifted_quadratic(LocalSet::WholeSpace);
        let cert = kkt_residuals(&spec, &dv(&[1.0]), &dv(&[])).unwrap();
        assert_eq!(cert.worst(), 0.0);
    }

    #[test]
    fn kkt_boundary_stationarity_via_normal_cone() {
        let spec = shifted_quadratic(LocalSet::uniform_box(1, -1.0, 0.0).unwrap());
        let cert = kkt_residuals(&spec, &dv(&[0.0]), &dv(&[])).unwrap();
        assert_eq!(cert.stationarity_residual, 0.0);
        let cert = kkt_residuals(&spec, &dv(&[-0.5]), &dv(&[])).unwrap();
        assert_abs_diff_eq!(cert.stationarity_residual, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn kkt_reports_violation_magnitude() {
        // g(x) = x − 1 ≤ 0 violated by 0.75 at x = 1.75
        let agent = AgentProblem::builder(1)
            .objective(|x| x[0], |_| dv(&[1.0]))
            .inequality(1, |x| dv(&[x[0] - 1.0]), |_| DMatrix::from_element(1, 1, 1.0))
            .build()
            .unwrap();
        let spec = ProblemSpec::new(vec![agent]).unwrap();
        let cert = kkt_residuals(&spec, &dv(&[1.75]), &dv(&[-2.0])).unwrap();
        assert_abs_diff_eq!(cert.primal_feasibility, 0.75, epsilon = 1e-15);
        assert_eq!(cert.dual_feasibility, 2.0);
        assert_abs_diff_eq!(cert.complementarity, 1.5, epsilon = 1e-15);
        assert!(kkt_residuals(&spec, &dv(&[1.0]), &dv(&[])).is_err());
    }

    #[test]
    fn centralized_two_agent_closed_form() {
        let spec = two_agent_budget(LocalSet::WholeSpace);
        let sol = centralized_solve(&spec, &OracleConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.x[1], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.lambda0[0], -0.5, epsilon = 1e-8);
        assert!(sol.certificate.passes(1e-10));
        assert_abs_diff_eq!(sol.objective, 0.25, epsilon = 1e-8);
    }

    #[test]
    fn centralized_reports_infeasible_system() {
        // x − 1 = 0 and x + 1 = 0 cannot both hold
        let agent = AgentProblem::builder(1)
            .objective(|x| 0.5 * x[0] * x[0], |x| dv(&[x[0]]))
            .equality(DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), dv(&[-1.0, 1.0]))
            .build()
            .unwrap();
        let spec = ProblemSpec::new(vec![agent]).unwrap();
        let cfg = OracleConfig {
            tol: 1e-8,
            max_iters: 5_000,
            seed: 1,
        };
        assert!(matches!(
            centralized_solve(&spec, &cfg),
            Err(OracleError::NoConvergence { .. })
        ));
    }

    #[test]
    fn grid_examples() {
        let agent = AgentProblem::builder(1)
            .objective(|x| x[0] * x[0], |x| dv(&[2.0 * x[0]]))
            .local_set(LocalSet::uniform_box(1, -1.0, 1.0).unwrap())
            .build()
            .unwrap();
        let spec = ProblemSpec::new(vec![agent]).unwrap();
        let g = grid_oracle(&spec, 0.01).unwrap();
        assert!(g.x_best[0].abs() <= 0.01);
        assert!(g.f_best <= 1e-4);

        let spec = two_agent_budget(LocalSet::uniform_box(1, -1.0, 1.0).unwrap());
        let g = grid_oracle(&spec, 0.01).unwrap();
        assert!((g.f_best - 0.25).abs() <= 1e-3, "f_best = {}", g.f_best);
    }

    #[test]
    fn grid_guards() {
        let agent = AgentProblem::builder(2)
            .objective(|x| x.norm_squared(), |x| x * 2.0)
            .local_set(LocalSet::uniform_box(2, -1.0, 1.0).unwrap())
            .build()
            .unwrap();
        let spec = ProblemSpec::new(vec![agent.clone(), agent]).unwrap();
        assert_eq!(grid_oracle(&spec, 0.1).unwrap_err(), OracleError::DimensionTooLarge(4));

        let spec = shifted_quadratic(LocalSet::WholeSpace);
        assert_eq!(grid_oracle(&spec, 0.1).unwrap_err(), OracleError::UnboundedSet);
        let spec = shifted_quadratic(LocalSet::ball(vec![0.0], 1.0).unwrap());
        assert_eq!(grid_oracle(&spec, 0.1).unwrap_err(), OracleError::UnboundedSet);
    }
}
