//! Communication graph: weighted undirected adjacency, Laplacian and the
//! spectral quantities the step-size bounds depend on.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

/// Threshold on the second-smallest Laplacian eigenvalue used as a
/// secondary connectivity signal. Breadth-first traversal is authoritative.
pub const FIEDLER_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid graph size {0}")]
    InvalidSize(usize),
    #[error("invalid edge ({i}, {j}, {weight}): {reason}")]
    InvalidEdge {
        i: usize,
        j: usize,
        weight: f64,
        reason: &'static str,
    },
    #[error("duplicate edge between {0} and {1}")]
    DuplicateEdge(usize, usize),
    #[error("graph is disconnected ({components} components, lambda_2 = {lambda_2:e})")]
    DisconnectedGraph { components: usize, lambda_2: f64 },
}

/// Weighted undirected connected graph over agents `0..n`.
///
/// Immutable once built; all spectral data is computed at construction.
#[derive(Debug, Clone, Serialize)]
pub struct NetworkGraph {
    n_agents: usize,
    #[serde(skip)]
    adjacency: DMatrix<f64>,
    #[serde(skip)]
    laplacian: DMatrix<f64>,
    #[serde(skip)]
    neighbors: Vec<Vec<(usize, f64)>>,
    eigenvalues: Vec<f64>,
    lambda_max: f64,
    lambda_2: f64,
}

impl NetworkGraph {
    /// Builds a graph from 0-based undirected edges `(i, j, weight)`.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::InvalidSize(n));
        }
        let mut adjacency = DMatrix::zeros(n, n);
        let mut seen = BTreeSet::new();
        for &(i, j, weight) in edges {
            let invalid = |reason| GraphError::InvalidEdge { i, j, weight, reason };
            if i >= n || j >= n {
                return Err(invalid("endpoint out of range"));
            }
            if i == j {
                return Err(invalid("self-loop"));
            }
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(invalid("weight must be positive and finite"));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(GraphError::DuplicateEdge(i, j));
            }
            adjacency[(i, j)] = weight;
            adjacency[(j, i)] = weight;
        }

        let mut laplacian = -adjacency.clone();
        for i in 0..n {
            laplacian[(i, i)] = adjacency.row(i).sum();
        }

        let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| adjacency[(i, j)] > 0.0)
                    .map(|j| (j, adjacency[(i, j)]))
                    .collect()
            })
            .collect();

        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(laplacian.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigenvalues.sort_by(f64::total_cmp);
        let lambda_max = eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
        let lambda_2 = if n > 1 { eigenvalues[1] } else { 0.0 };

        let components = count_components(&neighbors);
        if components != 1 {
            return Err(GraphError::DisconnectedGraph { components, lambda_2 });
        }
        if n > 1 && lambda_2 <= FIEDLER_TOL {
            // Traversal says connected but the spectrum disagrees; only
            // reachable with pathologically small weights.
            log::warn!("connected graph with lambda_2 = {lambda_2:e} below tolerance");
        }

        Ok(Self {
            n_agents: n,
            adjacency,
            laplacian,
            neighbors,
            eigenvalues,
            lambda_max,
            lambda_2,
        })
    }

    /// Unit-weight cycle `0 - 1 - ... - (n-1) - 0`.
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::InvalidSize(n));
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// Neighbors of agent `i` with their edge weights `a_ij`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Laplacian eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Algebraic connectivity.
    pub fn lambda_2(&self) -> f64 {
        self.lambda_2
    }

    /// `sum_j a_ij (v_i - v_j)` for every agent, i.e. the action of `L ⊗ I_m`
    /// on a stacked vector given as one slice per agent.
    pub fn laplacian_apply(&self, values: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..self.n_agents)
            .map(|i| self.laplacian_row_apply(i, values))
            .collect()
    }

    /// Row `i` of `(L ⊗ I_m) v`.
    pub fn laplacian_row_apply(&self, i: usize, values: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(values[i].len());
        for &(j, w) in &self.neighbors[i] {
            out += (&values[i] - &values[j]) * w;
        }
        out
    }
}

fn count_components(neighbors: &[Vec<(usize, f64)>]) -> usize {
    let n = neighbors.len();
    let mut visited = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if visited[start] {
            continue;
        }
        components += 1;
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &neighbors[u] {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    components
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration. Used as an independent check on the dense eigensolver.
pub fn power_iteration_lambda_max(matrix: &DMatrix<f64>, max_iters: usize, tol: f64) -> f64 {
    let n = matrix.nrows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic start vector with components in every eigendirection
    // for the matrices we care about (alternating, irregular magnitudes).
    let mut v = DVector::from_fn(n, |i, _| {
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        s * (1.0 + 0.37 * i as f64)
    });
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let w = matrix * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= tol * next.abs().max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}
