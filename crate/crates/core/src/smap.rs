//! The forward map `p -> u = p + v_p`, its inverse through the Riesz
//! representation and an a-harmonic fit, and roundtrip studies.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apoly::{self, a_harmonic_basis, fit_a_harmonic, is_in_p0prime, APolynomial, MAX_BASIS_DEGREE};
use crate::error::{Error, Result};
use crate::obstacle_solver::{coincidence_mask, solve_linear, solve_psor, LinearProblem, SolveReport, SolverParams, ThinObstacleProblem};
use crate::potential::{
    barrier_wc, density_disagreement, extract_neumann_density, riesz_potential, riesz_potential_many, CoincidenceSet,
    ExtractionMethod, NeumannDensity, RieszParams,
};
use crate::weighted_grid::{build_grid, check_truncation, Field, GridMode, GridSpec, WeightedGrid};

/// Coefficients below this fraction of the largest are dropped from the fit.
pub const PRUNE_RELATIVE: f64 = 1e-3;

/// Two extractions differing by more than this are flagged.
pub const DENSITY_DISAGREEMENT_FLAG: f64 = 0.05;

/// Discretization and solver settings shared by the forward and inverse maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverParams,
    /// Absolute contact tolerance; defaults to `1e-6` times the obstacle range.
    #[serde(default)]
    pub contact_tol: Option<f64>,
    /// Density stored with the forward solution.
    #[serde(default)]
    pub extraction: ExtractionMethod,
    /// Density used by the inverse map.
    #[serde(default = "default_inverse_extraction")]
    pub inverse_extraction: ExtractionMethod,
    /// Fit annulus `[lo, hi]` as fractions of `L`.
    #[serde(default = "default_annulus")]
    pub fit_annulus: [f64; 2],
    #[serde(default = "default_fit_degree")]
    pub fit_degree: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_inverse_extraction() -> ExtractionMethod {
    ExtractionMethod::DiscreteFlux
}

fn default_annulus() -> [f64; 2] {
    [0.5, 0.75]
}

fn default_fit_degree() -> usize {
    MAX_BASIS_DEGREE
}

impl Numerics {
    pub fn new(grid: GridSpec, solver: SolverParams) -> Self {
        Self {
            grid,
            solver,
            contact_tol: None,
            extraction: ExtractionMethod::OneLayer,
            inverse_extraction: default_inverse_extraction(),
            fit_annulus: default_annulus(),
            fit_degree: MAX_BASIS_DEGREE,
            seed: 0,
        }
    }

    /// Same settings on the grid with spacing halved.
    pub fn refined(&self) -> Self {
        Self { grid: self.grid.refined(), ..self.clone() }
    }
}

/// An approximate element of the solution class: `u = p + v` with its
/// contact set and Neumann density.
#[derive(Debug, Clone)]
pub struct GlobalSolutionApprox {
    pub p: APolynomial,
    pub v: Field,
    pub u: Field,
    pub mask: CoincidenceSet,
    pub density: NeumannDensity,
    pub solve_report: SolveReport,
    pub contact_tol: f64,
}

impl GlobalSolutionApprox {
    pub fn grid(&self) -> &Arc<WeightedGrid> {
        self.u.grid()
    }
}

/// `(radius, max |x'_i|)` outer-quarter membership for a thin node.
fn in_outer_quarter(grid: &WeightedGrid, k: usize) -> bool {
    let c = grid.thin_coords(k);
    c.iter().fold(0.0f64, |m, x| m.max(x.abs())) >= 0.75 * grid.half_extent()
}

/// Solves the thin obstacle problem with obstacle `-p` and zero far-field
/// data and assembles `u = p + v_p`.
pub fn s_map(p: &APolynomial, numerics: &Numerics) -> Result<GlobalSolutionApprox> {
    let grid = build_grid(numerics.grid.clone())?;
    s_map_on(p, &grid, numerics)
}

pub fn s_map_on(p: &APolynomial, grid: &Arc<WeightedGrid>, numerics: &Numerics) -> Result<GlobalSolutionApprox> {
    let a = grid.weight_a();
    if p.dimension() != grid.dimension() {
        return Err(Error::DimensionMismatch { expected: grid.dimension(), found: p.dimension() });
    }
    let membership = is_in_p0prime(p, a);
    if !membership.is_member() {
        return Err(Error::NotAMember(membership.witness));
    }
    if grid.mode() == GridMode::Axisymmetric && !p.is_radial(1e-12) {
        return Err(Error::InvalidInput("axisymmetric grids require a radial polynomial".into()));
    }
    let problem = ThinObstacleProblem::from_polynomial(grid, p)?;
    let thin_p: Vec<f64> = problem.obstacle().iter().map(|psi| -psi).collect();
    if let Some(k) = (0..thin_p.len()).find(|&k| in_outer_quarter(grid, k) && thin_p[k] <= 0.0) {
        return Err(Error::BoxTooSmall(format!(
            "p(x', 0) = {:.3e} <= 0 at x' = {:?} in the outer quarter of the thin plane",
            thin_p[k],
            grid.thin_coords(k)
        )));
    }
    let support_radius = (0..thin_p.len())
        .filter(|&k| thin_p[k] < 0.0)
        .map(|k| grid.thin_coords(k).iter().map(|c| c * c).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    check_truncation(grid, support_radius);

    let report = solve_psor(&problem, &numerics.solver, None)?;
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, last_update: report.last_update });
    }
    let contact_tol = numerics.contact_tol.unwrap_or_else(|| problem.default_contact_tol());
    let v = report.solution.clone();
    let mask = if thin_p.iter().all(|&x| x >= 0.0) {
        // -p <= 0: v = 0 is the solution and touches only where p vanishes
        coincidence_mask(&v, &problem, 0.0)
    } else {
        coincidence_mask(&v, &problem, contact_tol)
    };
    if mask.touches_boundary() {
        return Err(Error::MaskTouchesBoundary);
    }
    let p_field = Field::from_fn(grid, |x| p.eval_unchecked(x));
    let u = p_field.add(&v)?;
    let density = extract_neumann_density(&u, &mask, numerics.extraction)?;
    if density.max_positive() > numerics.solver.residual_tol() * density.max_abs().max(1.0) {
        log::warn!("positive Neumann density {:.3e} on the contact set", density.max_positive());
    }
    Ok(GlobalSolutionApprox {
        p: p.clone(),
        v,
        u,
        mask,
        density,
        solve_report: report,
        contact_tol,
    })
}

/// Diagnostics of one inverse-map evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseReport {
    pub samples: usize,
    pub fit_residual_rms: f64,
    pub data_rms: f64,
    pub condition_number: f64,
    /// RMS of `u - p_hat - v_hat` (truncation-corrected) over the fit annulus.
    pub far_field_rms: f64,
    pub annulus: [f64; 2],
    pub method: ExtractionMethod,
    /// Relative disagreement of the one- and two-layer extractions.
    pub layer_disagreement: f64,
    pub max_positive_density: f64,
    pub flags: Vec<String>,
}

/// Deterministic points on the annulus `lo <= |x| <= hi` where `u` is known,
/// as `(node, physical point)`. Axisymmetric nodes are rotated to random directions.
fn annulus_samples(grid: &WeightedGrid, lo: f64, hi: f64, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_dim = grid.dimension();
    grid.interior_nodes()
        .iter()
        .copied()
        .filter(|&n| (lo..=hi).contains(&grid.radius(n)))
        .map(|n| {
            let x = match grid.mode() {
                GridMode::FullTensor => grid.physical_point(n),
                GridMode::Axisymmetric => {
                    let c = grid.node_coords(n);
                    let dir = apoly::random_unit(&mut rng, n_dim);
                    let mut x: Vec<f64> = dir.iter().map(|d| d * c[0]).collect();
                    x.push(c[1]);
                    x
                }
            };
            (n, x)
        })
        .collect()
}

/// Harmonic extension of the Riesz potential's boundary values: the part of
/// `v_hat` that zero far-field data removes from the discrete solution.
fn truncation_correction(density: &NeumannDensity, mask: &CoincidenceSet, riesz: &RieszParams, params: &SolverParams) -> Result<Field> {
    let grid = mask.grid();
    let points: Vec<Vec<f64>> = grid.boundary_nodes().iter().map(|&n| grid.physical_point(n)).collect();
    let boundary = riesz_potential_many(density, mask, riesz, &points)?;
    let scale = boundary.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(Field::zeros(grid));
    }
    let mut p = params.clone();
    p.tol = params.tol.min(1e-6 * scale);
    let report = solve_linear(&LinearProblem::homogeneous(grid, boundary)?, &p, None)?;
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, last_update: report.last_update });
    }
    Ok(report.solution)
}

/// Recovers the asymptotic polynomial of `u`: extracts the density on
/// `mask`, subtracts the (truncation-corrected) Riesz potential on the fit
/// annulus and fits an a-harmonic polynomial to the remainder.
pub fn inverse_s_map(u: &Field, mask: &CoincidenceSet, riesz: &RieszParams, numerics: &Numerics) -> Result<(APolynomial, InverseReport)> {
    let grid = u.grid();
    let (n_dim, a) = (grid.dimension(), grid.weight_a());
    if mask.touches_boundary() {
        return Err(Error::MaskTouchesBoundary);
    }
    let mut flags = Vec::new();
    let density = extract_neumann_density(u, mask, numerics.inverse_extraction)?;
    let one = extract_neumann_density(u, mask, ExtractionMethod::OneLayer)?;
    let two = extract_neumann_density(u, mask, ExtractionMethod::TwoLayer)?;
    let layer_disagreement = density_disagreement(&one, &two);
    if layer_disagreement > DENSITY_DISAGREEMENT_FLAG {
        flags.push(format!("one- and two-layer densities disagree by {:.1}%", 100.0 * layer_disagreement));
    }
    let max_positive_density = density.max_positive();
    if max_positive_density > 1e-6 * density.max_abs().max(1e-300) && !density.is_empty() {
        flags.push(format!("positive density {max_positive_density:.3e} on the contact set"));
    }

    let l = grid.half_extent();
    let [lo, hi] = numerics.fit_annulus;
    let samples = annulus_samples(grid, lo * l, hi * l, numerics.seed);
    let correction = if density.is_empty() {
        None
    } else {
        Some(truncation_correction(&density, mask, riesz, &numerics.solver)?)
    };
    let points: Vec<Vec<f64>> = samples.iter().map(|(_, x)| x.clone()).collect();
    let v_hat = riesz_potential_many(&density, mask, riesz, &points)?;
    let data: Vec<(Vec<f64>, f64)> = samples
        .iter()
        .zip(&v_hat)
        .map(|((n, x), vh)| {
            let h = correction.as_ref().map_or(0.0, |c| c.values()[*n]);
            (x.clone(), u.values()[*n] - (vh - h))
        })
        .collect();
    let basis = a_harmonic_basis(n_dim, a, numerics.fit_degree)?;
    let fit = fit_a_harmonic(&data, &basis)?;
    let p_hat = fit.polynomial.pruned(PRUNE_RELATIVE);
    let far_field_rms = (data.iter().map(|(x, y)| (y - p_hat.eval_unchecked(x)).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
    if fit.residual_rms > 1e-3 * fit.data_rms {
        flags.push(format!("fit residual {:.3e} is large relative to data {:.3e}", fit.residual_rms, fit.data_rms));
    }
    Ok((
        p_hat,
        InverseReport {
            samples: data.len(),
            fit_residual_rms: fit.residual_rms,
            data_rms: fit.data_rms,
            condition_number: fit.condition_number,
            far_field_rms,
            annulus: numerics.fit_annulus,
            method: numerics.inverse_extraction,
            layer_disagreement,
            max_positive_density,
            flags,
        },
    ))
}

/// Largest relative coefficient error: per coefficient of `p`, and
/// `|p_hat_c| / scale(p)` for monomials absent from `p`.
pub fn coefficient_error(p: &APolynomial, p_hat: &APolynomial) -> f64 {
    let scale = p.scale().max(f64::MIN_POSITIVE);
    let mut err = 0.0f64;
    for (m, &c) in p.terms() {
        err = err.max((p_hat.coeff(m) - c).abs() / c.abs());
    }
    for (m, &c) in p_hat.terms() {
        if !p.terms().contains_key(m) {
            err = err.max(c.abs() / scale);
        }
    }
    err
}

/// Max-norm distance between coefficient vectors.
pub fn coefficient_distance(p: &APolynomial, q: &APolynomial) -> f64 {
    p.sub(q).map(|d| d.scale()).unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundtripReport {
    pub h: f64,
    #[serde(rename = "L")]
    pub half_extent: f64,
    pub coefficient_error: f64,
    pub far_field_rms: f64,
    pub fitted: apoly::PolynomialDoc,
    pub mask_count: usize,
    pub iterations: usize,
    pub inverse: InverseReport,
    pub flags: Vec<String>,
}

/// `S^-1(S(p))` on one grid.
pub fn roundtrip_level(p: &APolynomial, numerics: &Numerics, riesz: &RieszParams) -> Result<(GlobalSolutionApprox, RoundtripReport)> {
    let sol = s_map(p, numerics)?;
    let (p_hat, inverse) = inverse_s_map(&sol.u, &sol.mask, riesz, numerics)?;
    let report = RoundtripReport {
        h: numerics.grid.spacing(),
        half_extent: numerics.grid.half_extent,
        coefficient_error: coefficient_error(p, &p_hat),
        far_field_rms: inverse.far_field_rms,
        fitted: apoly::PolynomialDoc::from_polynomial(&p_hat, numerics.grid.weight_a),
        mask_count: sol.mask.count(),
        iterations: sol.solve_report.iterations,
        flags: inverse.flags.clone(),
        inverse,
    };
    Ok((sol, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundtripStudy {
    pub levels: Vec<RoundtripReport>,
    /// Whether the refined coefficient error is strictly smaller.
    pub improved: bool,
}

/// Roundtrip on the base grid and one refinement; `alpha_for` supplies the
/// calibrated Riesz parameters of each grid.
pub fn roundtrip(
    p: &APolynomial,
    numerics: &Numerics,
    mut alpha_for: impl FnMut(&GridSpec) -> Result<RieszParams>,
) -> Result<RoundtripStudy> {
    let mut levels = Vec::new();
    for num in [numerics.clone(), numerics.refined()] {
        let riesz = alpha_for(&num.grid)?;
        levels.push(roundtrip_level(p, &num, &riesz)?.1);
    }
    let improved = levels[1].coefficient_error < levels[0].coefficient_error;
    Ok(RoundtripStudy { levels, improved })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub distance: f64,
    pub noise: f64,
    pub distinct: bool,
}

/// Roundtrips two polynomials and checks that the fits stay distinguishable
/// (coefficient distance above three times the larger fit error).
pub fn injectivity_probe(p: &APolynomial, q: &APolynomial, numerics: &Numerics, riesz: &RieszParams) -> Result<InjectivityReport> {
    let sp = s_map(p, numerics)?;
    let sq = s_map(q, numerics)?;
    let (ph, _) = inverse_s_map(&sp.u, &sp.mask, riesz, numerics)?;
    let (qh, _) = inverse_s_map(&sq.u, &sq.mask, riesz, numerics)?;
    let noise = coefficient_distance(p, &ph).max(coefficient_distance(q, &qh));
    let distance = coefficient_distance(&ph, &qh);
    Ok(InjectivityReport { distance, noise, distinct: distance > 3.0 * noise })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GrowthReport {
    pub m: u32,
    /// `max |u| / (1 + |x|^m)` over the scanned points.
    pub ratio: f64,
    pub max_radius: f64,
}

impl GrowthReport {
    pub fn passes(&self, c: f64) -> bool {
        self.ratio <= c
    }
}

pub fn growth_scan(points: impl Iterator<Item = (f64, f64)>, m: u32) -> GrowthReport {
    let mut ratio = 0.0f64;
    let mut max_radius = 0.0f64;
    for (r, u) in points {
        ratio = ratio.max(u.abs() / (1.0 + r.powi(m as i32)));
        max_radius = max_radius.max(r);
    }
    GrowthReport { m, ratio, max_radius }
}

/// `|u(x)| <= C (1 + |x|^m)` at every node.
pub fn growth_check(field: &Field, m: u32, c: f64) -> bool {
    let grid = field.grid();
    growth_scan((0..grid.len()).map(|n| (grid.radius(n), field.values()[n])), m).passes(c)
}

/// Growth scan over the grid plus `u = p + v_hat` on thin-plane and
/// oblique rays out to `max_radius`, beyond the truncation box.
pub fn growth_scan_extended(sol: &GlobalSolutionApprox, riesz: &RieszParams, m: u32, max_radius: f64) -> Result<GrowthReport> {
    let grid = sol.grid();
    let n_dim = grid.dimension();
    let on_grid = growth_scan((0..grid.len()).map(|n| (grid.radius(n), sol.u.values()[n])), m);
    let l = grid.half_extent();
    let mut far = Vec::new();
    let mut r = l;
    while r <= max_radius * (1.0 + 1e-12) {
        for angle in [0.0f64, 0.25, 0.5] {
            let t = angle * std::f64::consts::PI;
            let mut x = vec![0.0; n_dim + 1];
            x[0] = r * t.cos();
            x[n_dim] = r * t.sin();
            let v = riesz_potential(&sol.density, &sol.mask, riesz, &x)?;
            far.push((r, sol.p.eval_unchecked(&x) + v));
        }
        r *= 2.0;
    }
    let extended = growth_scan(far.into_iter(), m);
    Ok(GrowthReport { m, ratio: on_grid.ratio.max(extended.ratio), max_radius: extended.max_radius.max(on_grid.max_radius) })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierReport {
    pub c: f64,
    pub probes: usize,
    /// `max (-v)_+` over the probes.
    pub lower_violation: f64,
    /// `max (v - w_c)_+` over the probes.
    pub upper_violation: f64,
}

/// Checks `0 <= v_p <= w_c` at grid nodes at least two cells away from the
/// support, with `c = 2 alpha max |lambda|` over the set `{-p > 0}`.
pub fn barrier_check(sol: &GlobalSolutionApprox, riesz: &RieszParams, max_probes: usize) -> Result<BarrierReport> {
    let grid = sol.grid();
    let support = CoincidenceSet::new(
        grid,
        grid.thin_nodes().iter().map(|&n| sol.p.eval_unchecked(&grid.physical_point(n)) < 0.0).collect(),
    );
    let c = 2.0 * riesz.alpha * sol.density.max_abs();
    let h = grid.spacing();
    let reach = support.support_radius() + 2.0 * h;
    let candidates: Vec<usize> = grid
        .interior_nodes()
        .iter()
        .copied()
        .filter(|&n| grid.radius(n) >= reach)
        .collect();
    let stride = candidates.len().div_ceil(max_probes.max(1)).max(1);
    let mut lower = 0.0f64;
    let mut upper = 0.0f64;
    let mut probes = 0;
    for &n in candidates.iter().step_by(stride) {
        let v = sol.v.values()[n];
        let w = barrier_wc(c, &support, riesz, &grid.physical_point(n))?;
        lower = lower.max(-v);
        upper = upper.max(v - w);
        probes += 1;
    }
    Ok(BarrierReport { c, probes, lower_violation: lower, upper_violation: upper })
}

/// `|x'|^2 - 1 - (N/(1+a)) z^2`.
pub fn radial_quadratic(n_dim: usize, a: f64) -> Result<APolynomial> {
    let eye: Vec<Vec<f64>> = (0..n_dim).map(|i| (0..n_dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    apoly::quadratic_member(n_dim, a, &eye, -1.0, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numerics(n_dim: usize, n: usize, l: f64, a: f64) -> Numerics {
        let spec = GridSpec::new(n_dim, l, n, a, GridMode::Axisymmetric);
        let grid = WeightedGrid::new(spec.clone()).unwrap();
        Numerics::new(spec, SolverParams { tol: 1e-10, ..SolverParams::tuned(&grid) })
    }

    #[test]
    fn trivial_branch_is_identity() {
        let eye = vec![vec![1.0; 1]; 1];
        let p = apoly::quadratic_member(1, 0.0, &eye, 1.0, true).unwrap();
        let num = Numerics { grid: GridSpec::new(1, 4.0, 33, 0.0, GridMode::FullTensor), ..numerics(1, 33, 4.0, 0.0) };
        let sol = s_map(&p, &num).unwrap();
        assert!(sol.v.max_abs() < 1e-12);
        assert!(sol.mask.is_empty());
        let riesz = RieszParams::new(1, 0.0, 1.0).unwrap();
        let (p_hat, _) = inverse_s_map(&sol.u, &sol.mask, &riesz, &num).unwrap();
        assert!(coefficient_error(&p, &p_hat) < 1e-8);
    }

    #[test]
    fn non_members_and_small_boxes_are_rejected() {
        let num = numerics(3, 33, 4.0, 0.0);
        let neg = radial_quadratic(3, 0.0).unwrap().scaled(-1.0);
        assert!(matches!(s_map(&neg, &num), Err(Error::NotAMember(_))));
        let eye: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let wide = apoly::quadratic_member(3, 0.0, &eye, -12.0, true).unwrap();
        assert!(matches!(s_map(&wide, &num), Err(Error::BoxTooSmall(_))));
    }

    #[test]
    fn radial_mask_inside_unit_ball() {
        let num = numerics(3, 65, 4.0, 0.0);
        let sol = s_map(&radial_quadratic(3, 0.0).unwrap(), &num).unwrap();
        assert!(!sol.mask.is_empty());
        assert!(sol.mask.support_radius() < 1.0);
        let thin = sol.u.restrict_to_thin_plane();
        assert!(thin.iter().all(|&u| u >= -1e-9));
    }

    #[test]
    fn growth_of_constants() {
        let g = build_grid(GridSpec::new(1, 4.0, 9, 0.0, GridMode::FullTensor)).unwrap();
        let f = Field::constant(&g, 5.0);
        assert!(growth_check(&f, 0, 5.0));
        assert!(!growth_check(&f, 0, 2.4));
    }

    #[test]
    fn coefficient_error_counts_spurious_terms() {
        let p = radial_quadratic(1, 0.0).unwrap();
        let mut q = p.clone();
        q.add_term(apoly::Monomial::new(vec![1], 0), 0.01);
        assert!((coefficient_error(&p, &q) - 0.01).abs() < 1e-15);
        assert_eq!(coefficient_error(&p, &p), 0.0);
    }
}
