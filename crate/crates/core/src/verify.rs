//! Checks of the qualitative properties of computed global solutions:
//! convexity along thin-plane directions, convexity of the contact set,
//! concavity of the weighted z-flux, Hessian and potential decay.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{decay_exponent_fit, DecayFit};
use crate::smap::GlobalSolutionApprox;
use crate::weighted_grid::{Field, GridMode, WeightedGrid};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One named check with its measured value and tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// The mathematical statement the check exercises.
    pub anchor: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub runtime_ms: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub checks: Vec<CheckResult>,
}

impl Default for VerificationReport {
    fn default() -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, checks: Vec::new() }
    }
}

impl VerificationReport {
    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, other: VerificationReport) {
        self.checks.extend(other.checks);
    }

    /// Every check passed and names its anchor.
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed && !c.anchor.trim().is_empty())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed || c.anchor.trim().is_empty())
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Builder that times a check from creation to [`Check::finish`].
pub struct Check {
    name: String,
    anchor: String,
    start: Instant,
}

impl Check {
    pub fn start(name: &str, anchor: &str) -> Self {
        Self { name: name.into(), anchor: anchor.into(), start: Instant::now() }
    }

    /// `passed` is `measured <= tolerance` unless `passed` is given.
    pub fn finish(self, measured: f64, tolerance: f64, note: impl Into<String>) -> CheckResult {
        let passed = measured <= tolerance;
        self.finish_with(passed, measured, tolerance, note)
    }

    pub fn finish_with(self, passed: bool, measured: f64, tolerance: f64, note: impl Into<String>) -> CheckResult {
        CheckResult {
            name: self.name,
            anchor: self.anchor,
            passed,
            measured,
            tolerance,
            runtime_ms: self.start.elapsed().as_secs_f64() * 1e3,
            note: note.into(),
        }
    }
}

/// Thin-plane offset in lateral index units. In axisymmetric mode only the
/// first entry is used, as a radial step along the `x_1` axis; `tangential`
/// offsets step perpendicular to it and read `u` by linear interpolation in `r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offset {
    pub steps: Vec<i64>,
    #[serde(default)]
    pub tangential: bool,
}

impl Offset {
    pub fn new(steps: Vec<i64>) -> Self {
        Self { steps, tangential: false }
    }

    pub fn tangential(k: i64) -> Self {
        Self { steps: vec![k], tangential: true }
    }
}

/// Offsets used when none are given.
pub fn default_offsets(grid: &WeightedGrid) -> Vec<Offset> {
    match grid.mode() {
        GridMode::Axisymmetric => vec![Offset::new(vec![1]), Offset::new(vec![2]), Offset::tangential(1), Offset::tangential(2)],
        GridMode::FullTensor => match grid.dimension() {
            1 => vec![Offset::new(vec![1]), Offset::new(vec![2])],
            _ => {
                let mut v = vec![Offset::new(vec![1, 0]), Offset::new(vec![0, 1]), Offset::new(vec![1, 1]), Offset::new(vec![1, -1]), Offset::new(vec![2, 1])];
                for o in &mut v {
                    o.steps.resize(grid.dimension(), 0);
                }
                v
            }
        },
    }
}

/// Minimum of `u_h / |h|^2` over interior nodes where the stencil fits.
pub fn min_second_difference(field: &Field, offset: &Offset) -> Result<f64> {
    let grid = field.grid();
    let u = field.values();
    let ndim = grid.ndim();
    let dims = grid.dims();
    let h = grid.spacing();
    let mut min = f64::INFINITY;
    match grid.mode() {
        GridMode::Axisymmetric => {
            let k = offset.steps.first().copied().unwrap_or(0).unsigned_abs() as usize;
            if k == 0 {
                return Err(Error::InvalidInput("zero offset".into()));
            }
            let r = &grid.axes()[0].coords;
            let mr = dims[0];
            for &node in grid.interior_nodes() {
                let idx = grid.multi_index(node);
                let (i, j) = (idx[0], idx[1]);
                let at = |ii: usize| u[grid.flat_index(&[ii, j])];
                let d = if offset.tangential {
                    // u(sqrt(r^2 + (kh)^2)) on both sides
                    let rho = (r[i] * r[i] + (k as f64 * h).powi(2)).sqrt();
                    let pos = rho / h;
                    let lo = pos.floor() as usize;
                    if lo + 1 >= mr {
                        continue;
                    }
                    let t = pos - lo as f64;
                    let val = (1.0 - t) * at(lo) + t * at(lo + 1);
                    2.0 * (val - at(i))
                } else {
                    if i + k >= mr {
                        continue;
                    }
                    let below = if i >= k { i - k } else { k - i };
                    at(i + k) - 2.0 * at(i) + at(below)
                };
                min = min.min(d / (k as f64 * h).powi(2));
            }
        }
        GridMode::FullTensor => {
            if offset.steps.len() != ndim - 1 {
                return Err(Error::DimensionMismatch { expected: ndim - 1, found: offset.steps.len() });
            }
            if offset.steps.iter().all(|&s| s == 0) {
                return Err(Error::InvalidInput("zero offset".into()));
            }
            let len2 = offset.steps.iter().map(|&s| (s * s) as f64).sum::<f64>() * h * h;
            for &node in grid.interior_nodes() {
                let idx = grid.multi_index(node);
                let mut plus = idx.clone();
                let mut minus = idx.clone();
                let mut fits = true;
                for (k, &s) in offset.steps.iter().enumerate() {
                    let (p, m) = (idx[k] as i64 + s, idx[k] as i64 - s);
                    if p < 0 || m < 0 || p >= dims[k] as i64 || m >= dims[k] as i64 {
                        fits = false;
                        break;
                    }
                    plus[k] = p as usize;
                    minus[k] = m as usize;
                }
                if !fits {
                    continue;
                }
                let d = u[grid.flat_index(&plus)] - 2.0 * u[node] + u[grid.flat_index(&minus)];
                min = min.min(d / len2);
            }
        }
    }
    Ok(min)
}

/// Largest `d_z(|z|^a d_z u)` over interior nodes, as a flux difference per
/// weighted z-cell.
pub fn max_z_flux_difference(field: &Field) -> f64 {
    let grid = field.grid();
    let u = field.values();
    let z_axis = &grid.axes()[grid.ndim() - 1];
    let mut max = f64::NEG_INFINITY;
    for &node in grid.interior_nodes() {
        let j = *grid.multi_index(node).last().unwrap();
        let up = z_axis.face[j] * (u[node + 1] - u[node]);
        let down = if j > 0 { z_axis.face[j - 1] * (u[node] - u[node - 1]) } else { 0.0 };
        max = max.max((up - down) / z_axis.cell[j]);
    }
    max
}

/// Violations of digital convexity: lattice nodes of the thin plane inside the
/// convex hull of the masked nodes that are not masked themselves.
pub fn digital_convexity_violations(grid: &WeightedGrid, mask: &[bool]) -> Result<usize> {
    let dims = grid.dims();
    let lateral = &dims[..grid.ndim() - 1];
    let pts: Vec<Vec<usize>> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(k, _)| grid.multi_index(grid.thin_nodes()[k])[..lateral.len()].to_vec())
        .collect();
    if pts.is_empty() {
        return Ok(0);
    }
    match lateral.len() {
        1 => {
            let lo = pts.iter().map(|p| p[0]).min().unwrap();
            let hi = pts.iter().map(|p| p[0]).max().unwrap();
            let mut bad = (lo..=hi).filter(|&i| !mask[i]).count();
            if grid.mode() == GridMode::Axisymmetric && lo != 0 {
                // a radial mask that avoids r = 0 is an annulus
                bad += lo;
            }
            Ok(bad)
        }
        2 => {
            let hull = convex_hull(pts.iter().map(|p| (p[0] as i64, p[1] as i64)).collect());
            let (xmin, xmax) = (hull.iter().map(|p| p.0).min().unwrap(), hull.iter().map(|p| p.0).max().unwrap());
            let (ymin, ymax) = (hull.iter().map(|p| p.1).min().unwrap(), hull.iter().map(|p| p.1).max().unwrap());
            let mut bad = 0;
            for x in xmin..=xmax {
                for y in ymin..=ymax {
                    if in_hull(&hull, (x, y)) && !mask[x as usize * lateral[1] + y as usize] {
                        bad += 1;
                    }
                }
            }
            Ok(bad)
        }
        n => Err(Error::InvalidInput(format!("digital convexity not implemented for {n} lateral axes"))),
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain, counter-clockwise, collinear points dropped.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn in_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => cross(hull[0], hull[1], p) == 0 && (p.0 - hull[0].0) * (p.0 - hull[1].0) <= 0 && (p.1 - hull[0].1) * (p.1 - hull[1].1) <= 0,
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

/// Tolerance for the convexity checks: `max(10 tol / h^2, K h)` with `K`
/// the Hessian scale of `p` (twice its largest quadratic coefficient).
pub fn epsilon_grid(sol: &GlobalSolutionApprox, solver_tol: f64) -> f64 {
    let h = sol.grid().spacing();
    let k = 2.0 * sol.p.homogeneous_part(2).scale();
    (10.0 * solver_tol / (h * h)).max(k * h)
}

/// Convexity of `u` along the given thin-plane offsets, digital convexity of
/// the contact set and concavity of the weighted z-flux.
pub fn convexity_suite(sol: &GlobalSolutionApprox, offsets: &[Offset], solver_tol: f64) -> Result<VerificationReport> {
    let mut report = VerificationReport::default();
    let eps = epsilon_grid(sol, solver_tol);
    let offsets = if offsets.is_empty() { default_offsets(sol.grid()) } else { offsets.to_vec() };

    let check = Check::start("second_differences", "u(x+h) - 2u(x) + u(x-h) >= 0 for h in the thin plane");
    let mut min = f64::INFINITY;
    for o in &offsets {
        min = min.min(min_second_difference(&sol.u, o)?);
    }
    report.push(check.finish(-min, eps, format!("min u_h/|h|^2 = {min:.3e} over {} offsets; eps_grid = {eps:.3e}", offsets.len())));

    let check = Check::start("mask_digital_convexity", "the coincidence set is convex");
    let bad = digital_convexity_violations(sol.grid(), sol.mask.mask())?;
    report.push(check.finish(bad as f64, 0.0, format!("{} masked nodes", sol.mask.count())));

    let check = Check::start("z_flux_concavity", "d_z(|z|^a d_z u) <= 0");
    let max = max_z_flux_difference(&sol.u);
    report.push(check.finish(max, eps, format!("eps_grid = {eps:.3e}")));
    Ok(report)
}

/// Samples `|v_h| / |h|^2` (radial or first lateral direction, one cell)
/// along the diagonal ray `|x'| = z` for radii in `[r_min, r_max]`.
pub fn diagonal_second_differences(v: &Field, r_min: f64, r_max: f64) -> Vec<(f64, f64)> {
    let grid = v.grid();
    let u = v.values();
    let dims = grid.dims();
    let ndim = grid.ndim();
    let h = grid.spacing();
    let mut out = Vec::new();
    let mz = dims[ndim - 1];
    for j in 1..mz - 1 {
        let mut idx = vec![0usize; ndim];
        idx[ndim - 1] = j;
        let i0 = match grid.mode() {
            GridMode::Axisymmetric => j,
            GridMode::FullTensor => {
                for k in 1..ndim - 1 {
                    idx[k] = dims[k] / 2;
                }
                dims[0] / 2 + j
            }
        };
        if i0 + 1 >= dims[0] {
            break;
        }
        idx[0] = i0;
        let node = grid.flat_index(&idx);
        let r = grid.radius(node);
        if r < r_min || r > r_max {
            continue;
        }
        let d = u[node + grid_stride0(grid)] - 2.0 * u[node] + u[node - grid_stride0(grid)];
        out.push((r, d / (h * h)));
    }
    out
}

fn grid_stride0(grid: &WeightedGrid) -> usize {
    grid.dims()[1..].iter().product()
}

/// Samples `v` along the same diagonal ray.
pub fn diagonal_values(v: &Field, r_min: f64, r_max: f64) -> Vec<(f64, f64)> {
    let grid = v.grid();
    let dims = grid.dims();
    let ndim = grid.ndim();
    let mut out = Vec::new();
    for j in 0..dims[ndim - 1] {
        let mut idx = vec![0usize; ndim];
        idx[ndim - 1] = j;
        let i0 = match grid.mode() {
            GridMode::Axisymmetric => j,
            GridMode::FullTensor => {
                for k in 1..ndim - 1 {
                    idx[k] = dims[k] / 2;
                }
                dims[0] / 2 + j
            }
        };
        if i0 >= dims[0] {
            break;
        }
        idx[0] = i0;
        let node = grid.flat_index(&idx);
        let r = grid.radius(node);
        if (r_min..=r_max).contains(&r) {
            out.push((r, v.values()[node]));
        }
    }
    out
}

/// Default decay window: from twice the contact radius (at least four
/// cells) out to `L/4`.
pub fn decay_window(sol: &GlobalSolutionApprox) -> (f64, f64) {
    let h = sol.grid().spacing();
    let r_min = (2.0 * sol.mask.support_radius()).max(4.0 * h);
    (r_min, 0.25 * sol.grid().half_extent())
}

/// Fitted decay of the second differences of `v = u - p` along the diagonal
/// ray; passes when the exponent is at most `-(N+1+a) + 0.5`.
pub fn hessian_decay_probe(sol: &GlobalSolutionApprox, window: Option<(f64, f64)>) -> Result<VerificationReport> {
    let mut report = VerificationReport::default();
    let check = Check::start("hessian_decay", "|D^2 v(x)| <= C |x|^-(N+1+a)");
    let n = sol.grid().dimension() as f64;
    let a = sol.grid().weight_a();
    let bound = -(n + 1.0 + a) + 0.5;
    if sol.mask.is_empty() {
        report.push(check.finish_with(true, f64::NAN, bound, "skipped: v vanishes identically"));
        return Ok(report);
    }
    let (r_min, r_max) = window.unwrap_or_else(|| decay_window(sol));
    let samples = diagonal_second_differences(&sol.v, r_min, r_max);
    let fit: DecayFit = decay_exponent_fit(&samples)?;
    report.push(check.finish(
        fit.exponent,
        bound,
        format!("{} radii in [{r_min:.3}, {r_max:.3}], R^2 = {:.4}", samples.len(), fit.r_squared),
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weighted_grid::{build_grid, GridSpec};

    #[test]
    fn quadratic_second_differences_are_exact() {
        let g = build_grid(GridSpec::new(2, 2.0, 17, 0.0, GridMode::FullTensor)).unwrap();
        let f = Field::from_fn(&g, |x| 3.0 * x[0] * x[0] + x[1] * x[1] - 4.0 * x[2] * x[2]);
        let min = min_second_difference(&f, &Offset::new(vec![1, 0])).unwrap();
        assert!((min - 6.0).abs() < 1e-9);
        let min = min_second_difference(&f, &Offset::new(vec![1, 1])).unwrap();
        assert!((min - 4.0).abs() < 1e-9);
    }

    #[test]
    fn dent_is_detected() {
        let g = build_grid(GridSpec::new(3, 2.0, 17, 0.0, GridMode::Axisymmetric)).unwrap();
        let mut f = Field::from_fn(&g, |x| x[0] * x[0]);
        assert!(min_second_difference(&f, &Offset::new(vec![1])).unwrap() > 1.99);
        let node = g.flat_index(&[4, 3]);
        f.values_mut()[node] += 0.1;
        assert!(min_second_difference(&f, &Offset::new(vec![1])).unwrap() < -1.0);
    }

    #[test]
    fn hull_test_accepts_discs_and_rejects_crescents() {
        let g = build_grid(GridSpec::new(2, 4.0, 33, 0.0, GridMode::FullTensor)).unwrap();
        let disc: Vec<bool> = (0..g.thin_nodes().len())
            .map(|k| g.thin_coords(k).iter().map(|c| c * c).sum::<f64>() <= 2.3f64.powi(2))
            .collect();
        assert_eq!(digital_convexity_violations(&g, &disc).unwrap(), 0);
        let crescent: Vec<bool> = (0..g.thin_nodes().len())
            .map(|k| {
                let c = g.thin_coords(k);
                let r2 = c[0] * c[0] + c[1] * c[1];
                r2 <= 4.0 && (c[0] - 1.0).powi(2) + c[1] * c[1] > 1.5
            })
            .collect();
        assert!(digital_convexity_violations(&g, &crescent).unwrap() > 0);
    }

    #[test]
    fn annulus_is_not_convex_in_radial_mode() {
        let g = build_grid(GridSpec::new(3, 4.0, 33, 0.0, GridMode::Axisymmetric)).unwrap();
        let mut mask = vec![false; g.thin_nodes().len()];
        mask[3] = true;
        mask[4] = true;
        assert_eq!(digital_convexity_violations(&g, &mask).unwrap(), 3);
        mask[0] = true;
        mask[1] = true;
        mask[2] = true;
        assert_eq!(digital_convexity_violations(&g, &mask).unwrap(), 0);
    }

    #[test]
    fn z_flux_of_weighted_quadratic() {
        let a = 0.5;
        let g = build_grid(GridSpec::new(1, 2.0, 33, a, GridMode::FullTensor)).unwrap();
        let f = Field::from_fn(&g, |x| -x[1] * x[1]);
        // d_z(z^a d_z(-z^2)) = -2(1+a) z^a, reported per weighted cell as -2(1+a)
        let m = max_z_flux_difference(&f);
        assert!(m < 0.0 && (m + 2.0 * (1.0 + a)).abs() < 1e-9, "{m}");
    }

    #[test]
    fn report_requires_anchors() {
        let mut r = VerificationReport::default();
        r.push(Check::start("x", "a statement").finish(0.0, 1.0, ""));
        assert!(r.all_passed());
        r.push(Check::start("y", " ").finish(0.0, 1.0, ""));
        assert!(!r.all_passed());
    }
}
