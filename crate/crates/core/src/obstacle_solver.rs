//! Projected successive over-relaxation for the discrete thin obstacle problem
//!
//! ```text
//! v >= psi on the thin plane,   L_a v <= 0,   L_a v = 0 off {z = 0, v = psi},
//! ```
//!
//! with Dirichlet data on the box boundary. The assembled operator is a
//! symmetric M-matrix, so the iteration converges for every `omega` in
//! `(0, 2)` and the complementarity solution is unique.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apoly::APolynomial;
use crate::error::{Error, Result};
use crate::potential::CoincidenceSet;
use crate::weighted_grid::{Field, WeightedGrid};

/// Red-black half sweeps with more nodes than this run in parallel.
const PARALLEL_HALF_SWEEP: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    Lexicographic,
    RedBlack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    pub omega: f64,
    /// Stop when the max-norm update of a sweep drops below this.
    pub tol: f64,
    pub max_iter: usize,
    pub sweep_order: SweepOrder,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { omega: 1.5, tol: 1e-8, max_iter: 200_000, sweep_order: SweepOrder::Lexicographic }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::InvalidInput(format!("relaxation factor must lie in (0, 2), got {}", self.omega)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }

    /// Default parameters with the relaxation factor of the model Poisson
    /// problem on the same number of nodes.
    pub fn tuned(grid: &WeightedGrid) -> Self {
        Self { omega: suggested_omega(grid), ..Self::default() }
    }

    /// Residuals accepted by `converged`.
    pub fn residual_tol(&self) -> f64 {
        10.0 * self.tol
    }
}

/// `2 / (1 + sin(pi / (n - 1)))` for `n` nodes along a full axis.
pub fn suggested_omega(grid: &WeightedGrid) -> f64 {
    let n = grid.spec().nodes_per_axis as f64;
    2.0 / (1.0 + (std::f64::consts::PI / (n - 1.0)).sin())
}

/// Obstacle on the thin plane plus Dirichlet data on the box boundary.
#[derive(Debug, Clone)]
pub struct ThinObstacleProblem {
    grid: Arc<WeightedGrid>,
    obstacle: Vec<f64>,
    boundary: Vec<f64>,
}

impl ThinObstacleProblem {
    /// `obstacle` is indexed like `grid.thin_nodes()`, `boundary` like `grid.boundary_nodes()`.
    pub fn new(grid: &Arc<WeightedGrid>, obstacle: Vec<f64>, boundary: Vec<f64>) -> Result<Self> {
        if obstacle.len() != grid.thin_nodes().len() {
            return Err(Error::DimensionMismatch { expected: grid.thin_nodes().len(), found: obstacle.len() });
        }
        if boundary.len() != grid.boundary_nodes().len() {
            return Err(Error::DimensionMismatch { expected: grid.boundary_nodes().len(), found: boundary.len() });
        }
        if obstacle.iter().chain(&boundary).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("obstacle and boundary data must be finite".into()));
        }
        Ok(Self { grid: Arc::clone(grid), obstacle, boundary })
    }

    pub fn with_zero_boundary(grid: &Arc<WeightedGrid>, obstacle: Vec<f64>) -> Result<Self> {
        let boundary = vec![0.0; grid.boundary_nodes().len()];
        Self::new(grid, obstacle, boundary)
    }

    /// Obstacle `psi = -p(., 0)` with zero far-field data.
    pub fn from_polynomial(grid: &Arc<WeightedGrid>, p: &APolynomial) -> Result<Self> {
        if p.dimension() != grid.dimension() {
            return Err(Error::DimensionMismatch { expected: grid.dimension(), found: p.dimension() });
        }
        let obstacle = grid.thin_nodes().iter().map(|&n| -p.eval_unchecked(&grid.physical_point(n))).collect();
        Self::with_zero_boundary(grid, obstacle)
    }

    pub fn grid(&self) -> &Arc<WeightedGrid> {
        &self.grid
    }

    pub fn obstacle(&self) -> &[f64] {
        &self.obstacle
    }

    pub fn boundary(&self) -> &[f64] {
        &self.boundary
    }

    pub fn weight_a(&self) -> f64 {
        self.grid.weight_a()
    }

    /// Returns the same problem with different Dirichlet data.
    pub fn with_boundary(&self, boundary: Vec<f64>) -> Result<Self> {
        Self::new(&self.grid, self.obstacle.clone(), boundary)
    }

    /// `1e-6` times the dynamic range of the obstacle (or of its magnitude).
    pub fn default_contact_tol(&self) -> f64 {
        let (lo, hi) = self.obstacle.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let range = hi - lo;
        let scale = if range > 0.0 { range } else { hi.abs().max(1.0) };
        1e-6 * scale
    }

    fn lower_bounds(&self) -> Vec<f64> {
        let mut lower = vec![f64::NEG_INFINITY; self.grid.len()];
        for (&node, &psi) in self.grid.thin_nodes().iter().zip(&self.obstacle) {
            lower[node] = psi;
        }
        lower
    }
}

/// Convergence data of a relaxation run plus the complementarity residuals.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Field,
    pub iterations: usize,
    pub last_update: f64,
    pub pde_residual_off_contact: f64,
    pub multiplier_sign_violation: f64,
    pub obstacle_violation: f64,
    pub converged: bool,
}

/// Serializable part of a [`SolveReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub last_update: f64,
    pub pde_residual_off_contact: f64,
    pub multiplier_sign_violation: f64,
    pub obstacle_violation: f64,
    pub converged: bool,
}

impl SolveReport {
    pub fn summary(&self) -> SolveSummary {
        SolveSummary {
            iterations: self.iterations,
            last_update: self.last_update,
            pde_residual_off_contact: self.pde_residual_off_contact,
            multiplier_sign_violation: self.multiplier_sign_violation,
            obstacle_violation: self.obstacle_violation,
            converged: self.converged,
        }
    }
}

/// The three complementarity diagnostics, each as a max norm of
/// `L_a v` normalized by the diagonal of its row (units of `v`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub pde_residual_off_contact: f64,
    pub multiplier_sign_violation: f64,
    pub obstacle_violation: f64,
}

struct Outcome {
    iterations: usize,
    last_update: f64,
}

fn init_values(grid: &WeightedGrid, init: Option<&Field>, boundary: &[f64]) -> Result<Vec<f64>> {
    let mut values = match init {
        Some(f) => {
            if f.values().len() != grid.len() {
                return Err(Error::DimensionMismatch { expected: grid.len(), found: f.values().len() });
            }
            f.values().to_vec()
        }
        None => vec![0.0; grid.len()],
    };
    for (&node, &g) in grid.boundary_nodes().iter().zip(boundary) {
        values[node] = g;
    }
    Ok(values)
}

#[inline]
fn relaxed_value(grid: &WeightedGrid, values: &[f64], node: usize, rhs: Option<&[f64]>, lower: &[f64], omega: f64) -> f64 {
    let s = rhs.map_or(0.0, |r| r[node]);
    let target = (grid.neighbor_sum(values, node) - s) / grid.diag(node);
    let old = values[node];
    (old + omega * (target - old)).max(lower[node])
}

fn first_non_finite(values: &[f64]) -> usize {
    values.iter().position(|v| !v.is_finite()).unwrap_or(0)
}

/// Core relaxation loop: flux balance `sum_j w_ij (v_j - v_i) = rhs_i`,
/// projected onto `v >= lower`.
fn relax(grid: &WeightedGrid, values: &mut [f64], rhs: Option<&[f64]>, lower: &[f64], params: &SolverParams) -> Result<Outcome> {
    params.validate()?;
    let omega = params.omega;
    let mut last_update = f64::INFINITY;
    for iter in 1..=params.max_iter {
        let mut max_update = 0.0f64;
        match params.sweep_order {
            SweepOrder::Lexicographic => {
                for &node in grid.interior_nodes() {
                    let new = relaxed_value(grid, values, node, rhs, lower, omega);
                    let d = (new - values[node]).abs();
                    if !(d <= max_update) {
                        max_update = d;
                    }
                    values[node] = new;
                }
            }
            SweepOrder::RedBlack => {
                for color in grid.colors() {
                    if color.len() >= PARALLEL_HALF_SWEEP {
                        let snapshot: &[f64] = values;
                        let updates: Vec<f64> = color
                            .par_iter()
                            .map(|&node| relaxed_value(grid, snapshot, node, rhs, lower, omega))
                            .collect();
                        for (&node, new) in color.iter().zip(updates) {
                            let d = (new - values[node]).abs();
                            if !(d <= max_update) {
                                max_update = d;
                            }
                            values[node] = new;
                        }
                    } else {
                        for &node in color {
                            let new = relaxed_value(grid, values, node, rhs, lower, omega);
                            let d = (new - values[node]).abs();
                            if !(d <= max_update) {
                                max_update = d;
                            }
                            values[node] = new;
                        }
                    }
                }
            }
        }
        if !max_update.is_finite() {
            return Err(Error::NonFinite { iteration: iter, node: first_non_finite(values) });
        }
        last_update = max_update;
        if max_update < params.tol {
            return Ok(Outcome { iterations: iter, last_update });
        }
    }
    Ok(Outcome { iterations: params.max_iter, last_update })
}

/// Solves the complementarity problem by projected relaxation, starting from
/// `init` (zero when absent).
pub fn solve_psor(problem: &ThinObstacleProblem, params: &SolverParams, init: Option<&Field>) -> Result<SolveReport> {
    let grid = &problem.grid;
    let mut values = init_values(grid, init, &problem.boundary)?;
    let lower = problem.lower_bounds();
    let outcome = relax(grid, &mut values, None, &lower, params)?;
    let solution = Field::from_values(grid, values)?;
    let res = complementarity_residual(&solution, problem, problem.default_contact_tol())?;
    let converged = outcome.last_update < params.tol
        && res.pde_residual_off_contact <= params.residual_tol()
        && res.multiplier_sign_violation <= params.residual_tol()
        && res.obstacle_violation <= params.residual_tol();
    Ok(SolveReport {
        solution,
        iterations: outcome.iterations,
        last_update: outcome.last_update,
        pde_residual_off_contact: res.pde_residual_off_contact,
        multiplier_sign_violation: res.multiplier_sign_violation,
        obstacle_violation: res.obstacle_violation,
        converged,
    })
}

/// Obstacle-free problem `sum_j w_ij (w_j - w_i) = source_i` (the integral of
/// `L_a w` over the row's cell) with Dirichlet data.
#[derive(Debug, Clone)]
pub struct LinearProblem {
    pub grid: Arc<WeightedGrid>,
    pub boundary: Vec<f64>,
    pub source: Option<Vec<f64>>,
}

impl LinearProblem {
    pub fn homogeneous(grid: &Arc<WeightedGrid>, boundary: Vec<f64>) -> Result<Self> {
        if boundary.len() != grid.boundary_nodes().len() {
            return Err(Error::DimensionMismatch { expected: grid.boundary_nodes().len(), found: boundary.len() });
        }
        Ok(Self { grid: Arc::clone(grid), boundary, source: None })
    }
}

/// Linear solve by (unprojected) relaxation; the residual fields of the
/// report measure the flux balance.
pub fn solve_linear(problem: &LinearProblem, params: &SolverParams, init: Option<&Field>) -> Result<SolveReport> {
    let grid = &problem.grid;
    if let Some(s) = &problem.source {
        if s.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), found: s.len() });
        }
    }
    let mut values = init_values(grid, init, &problem.boundary)?;
    let lower = vec![f64::NEG_INFINITY; grid.len()];
    let outcome = relax(grid, &mut values, problem.source.as_deref(), &lower, params)?;
    let mut residual = 0.0f64;
    for &node in grid.interior_nodes() {
        let s = problem.source.as_ref().map_or(0.0, |s| s[node]);
        residual = residual.max(((grid.flux_sum(&values, node) - s) / grid.diag(node)).abs());
    }
    let converged = outcome.last_update < params.tol && residual <= params.residual_tol();
    Ok(SolveReport {
        solution: Field::from_values(grid, values)?,
        iterations: outcome.iterations,
        last_update: outcome.last_update,
        pde_residual_off_contact: residual,
        multiplier_sign_violation: 0.0,
        obstacle_violation: 0.0,
        converged,
    })
}

/// `(max |L_a v| off contact, max (L_a v)_+, max (psi - v)_+)` with `L_a v`
/// normalized by the row diagonal. A thin node is in contact when
/// `v - psi <= contact_tol`.
pub fn complementarity_residual(field: &Field, problem: &ThinObstacleProblem, contact_tol: f64) -> Result<Residuals> {
    let grid = &problem.grid;
    let values = field.values();
    if values.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: values.len() });
    }
    let mut in_contact = vec![false; grid.len()];
    let mut obstacle_violation = 0.0f64;
    for (&node, &psi) in grid.thin_nodes().iter().zip(&problem.obstacle) {
        if values[node] - psi <= contact_tol {
            in_contact[node] = true;
        }
        if !grid.is_boundary(node) {
            obstacle_violation = obstacle_violation.max(psi - values[node]);
        }
    }
    let mut pde = 0.0f64;
    let mut sign = 0.0f64;
    for &node in grid.interior_nodes() {
        let r = grid.flux_sum(values, node) / grid.diag(node);
        sign = sign.max(r);
        if !in_contact[node] {
            pde = pde.max(r.abs());
        }
    }
    Ok(Residuals { pde_residual_off_contact: pde, multiplier_sign_violation: sign, obstacle_violation })
}

/// Thin nodes with `v - psi <= contact_tol`; exact ties count as contact.
pub fn coincidence_mask(field: &Field, problem: &ThinObstacleProblem, contact_tol: f64) -> CoincidenceSet {
    let grid = &problem.grid;
    let mask = grid
        .thin_nodes()
        .iter()
        .zip(&problem.obstacle)
        .map(|(&node, &psi)| field.values()[node] - psi <= contact_tol)
        .collect();
    CoincidenceSet::new(grid, mask)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `max (u1 - u2)_+`; the comparison principle demands this vanish.
    pub order_violation: f64,
    /// `max (u2 - u1 - max_boundary(g2 - g1))_+`.
    pub upper_violation: f64,
    pub boundary_gap: f64,
    pub converged: bool,
    pub iterations: [usize; 2],
}

/// Solves two problems sharing grid and obstacle with ordered boundary data
/// `g1 <= g2` and measures how well their solutions are ordered.
pub fn comparison_run(p1: &ThinObstacleProblem, p2: &ThinObstacleProblem, params: &SolverParams) -> Result<ComparisonReport> {
    if p1.grid.spec() != p2.grid.spec() {
        return Err(Error::InvalidInput("comparison requires both problems on the same grid".into()));
    }
    if p1.obstacle != p2.obstacle {
        return Err(Error::InvalidInput("comparison requires a shared obstacle".into()));
    }
    if p1.boundary.iter().zip(&p2.boundary).any(|(a, b)| a > b) {
        return Err(Error::InvalidInput("boundary data must satisfy g1 <= g2".into()));
    }
    let boundary_gap = p1.boundary.iter().zip(&p2.boundary).fold(0.0f64, |m, (a, b)| m.max(b - a));
    let r1 = solve_psor(p1, params, None)?;
    let r2 = solve_psor(p2, params, None)?;
    let (u1, u2) = (r1.solution.values(), r2.solution.values());
    let mut order_violation = 0.0f64;
    let mut upper_violation = 0.0f64;
    for (a, b) in u1.iter().zip(u2) {
        order_violation = order_violation.max(a - b);
        upper_violation = upper_violation.max(b - a - boundary_gap);
    }
    Ok(ComparisonReport {
        order_violation,
        upper_violation,
        boundary_gap,
        converged: r1.converged && r2.converged,
        iterations: [r1.iterations, r2.iterations],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub max_pairwise_deviation: f64,
    pub all_converged: bool,
    pub iterations: Vec<usize>,
}

/// Solves from every initial field and reports the largest pairwise max-norm deviation.
pub fn uniqueness_probe(problem: &ThinObstacleProblem, params: &SolverParams, inits: &[Field]) -> Result<UniquenessReport> {
    if inits.len() < 2 {
        return Err(Error::InvalidInput("uniqueness probe needs at least two initial fields".into()));
    }
    let reports = inits
        .iter()
        .map(|init| solve_psor(problem, params, Some(init)))
        .collect::<Result<Vec<_>>>()?;
    let mut max_dev = 0.0f64;
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            max_dev = max_dev.max(reports[i].solution.max_diff(&reports[j].solution)?);
        }
    }
    let all_converged = reports.iter().all(|r| r.converged);
    if !all_converged {
        log::warn!("uniqueness probe: at least one run did not converge");
    }
    Ok(UniquenessReport {
        max_pairwise_deviation: max_dev,
        all_converged,
        iterations: reports.iter().map(|r| r.iterations).collect(),
    })
}
