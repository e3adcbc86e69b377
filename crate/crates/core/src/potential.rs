//! Neumann densities on the contact set, Riesz potentials
//!
//! ```text
//! v(x) = alpha * sum_y (-2 lambda(y)) |x - (y, 0)|^-(N-1+a) dH^N(y)
//! ```
//!
//! the numerically calibrated constant `alpha`, the barrier `w_c` and
//! log-log decay fits.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obstacle_solver::{solve_linear, LinearProblem, SolverParams};
use crate::weighted_grid::{unit_sphere_area, Field, GridMode, GridSpec, WeightedGrid};

/// Contact mask on the thin plane with the `H^N` measure of each dual cell.
#[derive(Debug, Clone)]
pub struct CoincidenceSet {
    grid: Arc<WeightedGrid>,
    mask: Vec<bool>,
    cell_areas: Vec<f64>,
}

impl CoincidenceSet {
    /// `mask` is indexed like `grid.thin_nodes()`.
    pub fn new(grid: &Arc<WeightedGrid>, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), grid.thin_nodes().len(), "mask length must match the thin plane");
        let cell_areas = (0..mask.len()).map(|k| grid.thin_cell_area(k)).collect();
        Self { grid: Arc::clone(grid), mask, cell_areas }
    }

    pub fn empty(grid: &Arc<WeightedGrid>) -> Self {
        Self::new(grid, vec![false; grid.thin_nodes().len()])
    }

    pub fn grid(&self) -> &Arc<WeightedGrid> {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn cell_areas(&self) -> &[f64] {
        &self.cell_areas
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Thin-plane positions of the masked nodes.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k)
    }

    pub fn total_area(&self) -> f64 {
        self.indices().map(|k| self.cell_areas[k]).sum()
    }

    /// Largest `|y'|` over masked nodes (0 when empty).
    pub fn support_radius(&self) -> f64 {
        self.indices()
            .map(|k| self.grid.thin_coords(k).iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Whether some masked node is a Dirichlet node or adjacent to one.
    pub fn touches_boundary(&self) -> bool {
        self.indices().any(|k| self.grid.thin_touches_boundary(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    /// `(1-a) z_1^(a-1) (u_1 - u_0)`.
    #[default]
    OneLayer,
    /// Fits `u_0 + lambda z^(1-a)/(1-a) + c z^2` through the first two layers.
    TwoLayer,
    /// Flux balance of the thin row divided by its reduced lateral measure;
    /// the multiplier of the discrete complementarity system itself.
    DiscreteFlux,
}

/// Signed limit `lambda = lim z^a d_z u` on the masked nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeumannDensity {
    /// Thin-plane positions, in increasing order.
    pub nodes: Vec<usize>,
    pub lambda: Vec<f64>,
    pub method: ExtractionMethod,
}

impl NeumannDensity {
    pub fn empty() -> Self {
        Self { nodes: Vec::new(), lambda: Vec::new(), method: ExtractionMethod::OneLayer }
    }

    /// Uniform density on every masked node.
    pub fn uniform(mask: &CoincidenceSet, value: f64) -> Self {
        let nodes: Vec<usize> = mask.indices().collect();
        let lambda = vec![value; nodes.len()];
        Self { nodes, lambda, method: ExtractionMethod::OneLayer }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.lambda.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest positive value; positive densities contradict `L_a u <= 0`.
    pub fn max_positive(&self) -> f64 {
        self.lambda.iter().fold(0.0f64, |m, &v| m.max(v))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { lambda: self.lambda.iter().map(|v| c * v).collect(), ..self.clone() }
    }
}

/// Extracts the density on the masked nodes of `u`.
pub fn extract_neumann_density(u: &Field, mask: &CoincidenceSet, method: ExtractionMethod) -> Result<NeumannDensity> {
    let grid = u.grid();
    if grid.spec() != mask.grid.spec() {
        return Err(Error::InvalidInput("field and mask live on different grids".into()));
    }
    let a = grid.weight_a();
    let z = grid.z_coords();
    let values = u.values();
    let nodes: Vec<usize> = mask.indices().collect();
    let lambda = nodes
        .iter()
        .map(|&k| {
            let node = grid.thin_nodes()[k];
            let u0 = values[node];
            let d1 = values[grid.node_above(node, 1)] - u0;
            match method {
                ExtractionMethod::OneLayer => (1.0 - a) * z[1].powf(a - 1.0) * d1,
                ExtractionMethod::TwoLayer => {
                    let d2 = values[grid.node_above(node, 2)] - u0;
                    let (z1, z2) = (z[1], z[2]);
                    let det = z1.powf(1.0 - a) * z2 * z2 - z2.powf(1.0 - a) * z1 * z1;
                    (1.0 - a) * (d1 * z2 * z2 - d2 * z1 * z1) / det
                }
                ExtractionMethod::DiscreteFlux => grid.flux_sum(values, node) / grid.thin_reduced_measure(k),
            }
        })
        .collect();
    Ok(NeumannDensity { nodes, lambda, method })
}

/// Largest relative disagreement between two extractions of the same mask.
pub fn density_disagreement(d1: &NeumannDensity, d2: &NeumannDensity) -> f64 {
    let scale = d1.max_abs().max(d2.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    d1.lambda.iter().zip(&d2.lambda).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RieszParams {
    #[serde(rename = "N")]
    pub dimension: usize,
    pub a: f64,
    pub alpha: f64,
    /// Sequential compensated summation (bit-reproducible) instead of a parallel reduction.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl RieszParams {
    pub fn new(dimension: usize, a: f64, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { dimension, a, alpha, deterministic: true })
    }

    /// Kernel exponent `N - 1 + a`.
    pub fn exponent(&self) -> f64 {
        self.dimension as f64 - 1.0 + self.a
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
            let step = p1 / dp;
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

const GL_POINTS: usize = 8;

/// `int_{S^(N-1)} |x - (rho w, 0)|^(-s) dw` for `x = (r e_1, z)`.
fn sphere_average_kernel(n_dim: usize, r: f64, z: f64, rho: f64, s: f64, gl: &(Vec<f64>, Vec<f64>)) -> f64 {
    let a_term = r * r + rho * rho + z * z;
    let b_term = 2.0 * r * rho;
    if b_term <= 1e-12 * a_term {
        return unit_sphere_area(n_dim) * a_term.powf(-0.5 * s);
    }
    match n_dim {
        1 => ((r - rho).powi(2) + z * z).powf(-0.5 * s) + ((r + rho).powi(2) + z * z).powf(-0.5 * s),
        3 => {
            // int_{-1}^{1} (A - B t)^(-s/2) dt, times |S^1|
            let e = 1.0 - 0.5 * s;
            let (hi, lo) = (a_term + b_term, a_term - b_term);
            let integral = if e.abs() < 1e-12 {
                (hi.ln() - lo.ln()) / b_term
            } else {
                (hi.powf(e) - lo.powf(e)) / (b_term * e)
            };
            2.0 * std::f64::consts::PI * integral
        }
        _ => {
            // |S^(N-2)| int_0^pi (A - B cos t)^(-s/2) sin^(N-2) t dt, panels sized to the peak at t = 0
            let gap = (a_term - b_term).max(f64::MIN_POSITIVE);
            let width = (gap / b_term).sqrt();
            let panels = ((std::f64::consts::PI / width).ceil() as usize).clamp(4, 4096);
            let dt = std::f64::consts::PI / panels as f64;
            let (xs, ws) = gl;
            let mut acc = 0.0;
            for p in 0..panels {
                let mid = (p as f64 + 0.5) * dt;
                for (x, w) in xs.iter().zip(ws) {
                    let t = mid + 0.5 * dt * x;
                    acc += 0.5 * dt * w * (a_term - b_term * t.cos()).powf(-0.5 * s) * t.sin().powi(n_dim as i32 - 2);
                }
            }
            unit_sphere_area(n_dim - 1) * acc
        }
    }
}

/// Kernel-weighted sum `sum_k weight_k K(x, y_k) dH^N(y_k)` over the given
/// thin positions, with the kernel averaged over spheres in axisymmetric mode.
fn kernel_sum(mask: &CoincidenceSet, nodes: &[usize], weights: &[f64], s: f64, deterministic: bool, x: &[f64]) -> Result<f64> {
    let grid = &mask.grid;
    let n_dim = grid.dimension();
    if x.len() != n_dim + 1 {
        return Err(Error::DimensionMismatch { expected: n_dim + 1, found: x.len() });
    }
    let z = x[n_dim];
    let h = grid.spacing();
    let min_dist = nodes
        .iter()
        .map(|&k| {
            let y = grid.thin_coords(k);
            match grid.mode() {
                GridMode::FullTensor => {
                    (y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + z * z).sqrt()
                }
                GridMode::Axisymmetric => {
                    let r = x[..n_dim].iter().map(|c| c * c).sum::<f64>().sqrt();
                    ((r - y[0]).powi(2) + z * z).sqrt()
                }
            }
        })
        .fold(f64::INFINITY, f64::min);
    if min_dist < h * (1.0 - 1e-9) {
        return Err(Error::TooCloseToSupport { distance: min_dist, minimum: h });
    }
    let gl = gauss_legendre(GL_POINTS);
    let term = |(&k, &wt): (&usize, &f64)| -> f64 {
        let y = grid.thin_coords(k);
        match grid.mode() {
            GridMode::FullTensor => {
                let d2 = y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + z * z;
                wt * mask.cell_areas[k] * d2.powf(-0.5 * s)
            }
            GridMode::Axisymmetric => {
                let r = x[..n_dim].iter().map(|c| c * c).sum::<f64>().sqrt();
                wt * grid.thin_reduced_measure(k) * sphere_average_kernel(n_dim, r, z, y[0], s, &gl)
            }
        }
    };
    Ok(if deterministic {
        compensated_sum(nodes.iter().zip(weights).map(term))
    } else {
        nodes.par_iter().zip(weights.par_iter()).map(term).sum()
    })
}

/// `alpha * sum (-2 lambda) |x - y|^-(N-1+a) dH^N(y)` at a point `x` of `R^(N+1)`.
pub fn riesz_potential(density: &NeumannDensity, mask: &CoincidenceSet, params: &RieszParams, x: &[f64]) -> Result<f64> {
    if density.is_empty() {
        return Ok(0.0);
    }
    let weights: Vec<f64> = density.lambda.iter().map(|l| -2.0 * l).collect();
    Ok(params.alpha * kernel_sum(mask, &density.nodes, &weights, params.exponent(), params.deterministic, x)?)
}

/// Evaluates [`riesz_potential`] at many points in parallel.
pub fn riesz_potential_many(density: &NeumannDensity, mask: &CoincidenceSet, params: &RieszParams, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points.par_iter().map(|x| riesz_potential(density, mask, params, x)).collect()
}

/// `w_c(x) = sum c |x - y|^-(N-1+a) dH^N(y)` over the masked support.
pub fn barrier_wc(c: f64, support: &CoincidenceSet, params: &RieszParams, x: &[f64]) -> Result<f64> {
    let nodes: Vec<usize> = support.indices().collect();
    if nodes.is_empty() {
        return Ok(0.0);
    }
    let weights = vec![c; nodes.len()];
    kernel_sum(support, &nodes, &weights, params.exponent(), params.deterministic, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub r_squared: f64,
}

/// Least-squares slope of `log |value|` against `log radius`.
pub fn decay_exponent_fit(values: &[(f64, f64)]) -> Result<DecayFit> {
    if values.len() < 5 {
        return Err(Error::InvalidInput(format!("decay fit needs at least 5 radii, got {}", values.len())));
    }
    let (rmin, rmax) = values.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &(r, _)| (lo.min(r), hi.max(r)));
    if !(rmin > 0.0) || rmax < 4.0 * rmin {
        return Err(Error::InvalidInput(format!("radii must be positive and span a factor of 4, got [{rmin}, {rmax}]")));
    }
    let sign = values[0].1.signum();
    if values.iter().any(|&(_, v)| v == 0.0 || !v.is_finite() || v.signum() != sign) {
        return Err(Error::InvalidInput("decay fit needs nonzero values of one sign".into()));
    }
    let n = values.len() as f64;
    let xs: Vec<f64> = values.iter().map(|&(r, _)| r.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|&(_, v)| v.abs().ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(DecayFit { exponent: slope, prefactor: sign * intercept.exp(), r_squared })
}

/// Outcome of [`calibrate_alpha`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(rename = "N")]
    pub dimension: usize,
    pub a: f64,
    pub h: f64,
    #[serde(rename = "L")]
    pub half_extent: f64,
    pub mode: GridMode,
    pub alpha: f64,
    /// `(max - min) / median` of the probe ratios.
    pub spread: f64,
    pub probes: usize,
    pub source_radius: f64,
}

impl Calibration {
    pub fn riesz_params(&self) -> RieszParams {
        RieszParams { dimension: self.dimension, a: self.a, alpha: self.alpha, deterministic: true }
    }
}

/// Calibration fails above this probe-ratio spread.
pub const CALIBRATION_SPREAD_LIMIT: f64 = 0.10;

const MAX_CALIBRATION_PROBES: usize = 4000;

/// Determines `alpha` by comparing discrete solves with the unnormalized sum
/// for the density `lambda = -1` on a disc of radius `L/16`.
///
/// The far-field data is handled by superposition: `w0` solves the sourced
/// problem with zero data, `w1` the source-free problem whose boundary values
/// are the unnormalized sum `S`. The sourced problem with data `alpha S` is
/// `w0 + alpha w1`, and equating it with `alpha S` at each probe gives
/// `alpha = w0 / (S - w1)`, free of box truncation.
pub fn calibrate_alpha(grid: &Arc<WeightedGrid>, params: &SolverParams) -> Result<Calibration> {
    let l = grid.half_extent();
    let n_dim = grid.dimension();
    let radius = l / 16.0;
    let mask = CoincidenceSet::new(
        grid,
        (0..grid.thin_nodes().len())
            .map(|k| grid.thin_coords(k).iter().map(|c| c * c).sum::<f64>().sqrt() <= radius + 1e-12 * l)
            .collect(),
    );
    if mask.is_empty() {
        return Err(Error::InvalidGrid(format!("calibration disc of radius {radius} contains no nodes")));
    }
    let density = NeumannDensity::uniform(&mask, -1.0);
    let unit = RieszParams { dimension: n_dim, a: grid.weight_a(), alpha: 1.0, deterministic: true };

    let mut source = vec![0.0; grid.len()];
    for (&k, &lam) in density.nodes.iter().zip(&density.lambda) {
        source[grid.thin_nodes()[k]] = lam * grid.thin_reduced_measure(k);
    }
    let boundary_points: Vec<Vec<f64>> = grid.boundary_nodes().iter().map(|&n| grid.physical_point(n)).collect();
    let boundary_sum = riesz_potential_many(&density, &mask, &unit, &boundary_points)?;
    let scale = boundary_sum.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    let mut p = params.clone();
    p.tol = params.tol.min(1e-9 * scale);
    let w0 = solve_linear(
        &LinearProblem { grid: Arc::clone(grid), boundary: vec![0.0; boundary_sum.len()], source: Some(source) },
        &p,
        None,
    )?;
    let w1 = solve_linear(&LinearProblem::homogeneous(grid, boundary_sum)?, &p, None)?;
    if !w0.converged || !w1.converged {
        return Err(Error::NotConverged {
            iterations: w0.iterations.max(w1.iterations),
            last_update: w0.last_update.max(w1.last_update),
        });
    }

    let shell: Vec<usize> = grid
        .interior_nodes()
        .iter()
        .copied()
        .filter(|&n| {
            let r = grid.radius(n);
            (0.25 * l..=0.5 * l).contains(&r)
        })
        .collect();
    let stride = shell.len().div_ceil(MAX_CALIBRATION_PROBES).max(1);
    let probes: Vec<usize> = shell.into_iter().step_by(stride).collect();
    if probes.is_empty() {
        return Err(Error::InvalidGrid("no calibration probes in the mid-field shell".into()));
    }
    let points: Vec<Vec<f64>> = probes.iter().map(|&n| grid.physical_point(n)).collect();
    let sums = riesz_potential_many(&density, &mask, &unit, &points)?;
    let mut ratios: Vec<f64> = probes
        .iter()
        .zip(&sums)
        .map(|(&n, &s)| w0.solution.values()[n] / (s - w1.solution.values()[n]))
        .collect();
    ratios.sort_by(|x, y| x.total_cmp(y));
    let median = ratios[ratios.len() / 2];
    let spread = (ratios[ratios.len() - 1] - ratios[0]) / median.abs();
    let cal = Calibration {
        dimension: n_dim,
        a: grid.weight_a(),
        h: grid.spacing(),
        half_extent: l,
        mode: grid.mode(),
        alpha: median,
        spread,
        probes: probes.len(),
        source_radius: radius,
    };
    if !(median > 0.0) || !(spread <= CALIBRATION_SPREAD_LIMIT) {
        return Err(Error::CalibrationSpread { spread, limit: CALIBRATION_SPREAD_LIMIT });
    }
    Ok(cal)
}

/// JSON file of calibrations keyed by `(N, a, h, L)`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CalibrationCache {
    pub entries: Vec<Calibration>,
}

fn cache_key(n_dim: usize, a: f64, h: f64, l: f64, mode: GridMode) -> (usize, u64, u64, u64, GridMode) {
    (n_dim, a.to_bits(), h.to_bits(), l.to_bits(), mode)
}

impl CalibrationCache {
    /// Reads the cache, or returns an empty one if the file does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn lookup(&self, spec: &GridSpec) -> Option<&Calibration> {
        let key = cache_key(spec.dimension, spec.weight_a, spec.spacing(), spec.half_extent, spec.mode);
        self.entries.iter().find(|c| cache_key(c.dimension, c.a, c.h, c.half_extent, c.mode) == key)
    }

    /// Inserts or replaces the entry with the same key.
    pub fn insert(&mut self, cal: Calibration) {
        let key = cache_key(cal.dimension, cal.a, cal.h, cal.half_extent, cal.mode);
        match self.entries.iter().position(|c| cache_key(c.dimension, c.a, c.h, c.half_extent, c.mode) == key) {
            Some(i) => self.entries[i] = cal,
            None => self.entries.push(cal),
        }
    }
}
