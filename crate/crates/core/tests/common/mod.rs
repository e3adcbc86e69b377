//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fraclab_core::apoly::{APolynomial, Monomial};
use fraclab_core::obstacle_solver::ThinObstacleProblem;
use fraclab_core::weighted_grid::{build_grid, GridMode, GridSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::gamma;

/// Normalizing constant of the fundamental solution of `L_a` in `R^(N+1)`:
/// `alpha = 1 / ((N-1+a) |S| )` with the weighted sphere area
/// `2 pi^(N/2) Gamma((1+a)/2) / Gamma((N+1+a)/2)`.
pub fn closed_form_alpha(n: usize, a: f64) -> f64 {
    let n = n as f64;
    let sphere = 2.0 * std::f64::consts::PI.powf(n / 2.0) * gamma((1.0 + a) / 2.0) / gamma((n + 1.0 + a) / 2.0);
    1.0 / ((n - 1.0 + a) * sphere)
}

/// Dense interior operator `A` (rows `sum_j w_ij (v_i - v_j)`) and the right
/// hand side carrying the Dirichlet data.
pub fn dense_system(problem: &ThinObstacleProblem) -> (Vec<usize>, DMatrix<f64>, DVector<f64>) {
    let grid = problem.grid();
    let interior: Vec<usize> = grid.interior_nodes().to_vec();
    let mut pos = vec![usize::MAX; grid.len()];
    for (i, &n) in interior.iter().enumerate() {
        pos[n] = i;
    }
    let mut bval = vec![0.0; grid.len()];
    for (&n, &g) in grid.boundary_nodes().iter().zip(problem.boundary()) {
        bval[n] = g;
    }
    let m = interior.len();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (i, &n) in interior.iter().enumerate() {
        for (nb, w) in grid.neighbors(n) {
            a[(i, i)] += w;
            if pos[nb] != usize::MAX {
                a[(i, pos[nb])] -= w;
            } else {
                b[i] += w * bval[nb];
            }
        }
    }
    (interior, a, b)
}

/// Solves the discrete thin obstacle problem by trying every active set of
/// interior thin nodes. Returns the full nodal vector.
pub fn lcp_by_enumeration(problem: &ThinObstacleProblem) -> Vec<f64> {
    let grid = problem.grid();
    let (interior, a, b) = dense_system(problem);
    let mut obstacle = vec![f64::NEG_INFINITY; interior.len()];
    let mut thin = Vec::new();
    for (k, &tn) in grid.thin_nodes().iter().enumerate() {
        if let Some(i) = interior.iter().position(|&n| n == tn) {
            obstacle[i] = problem.obstacle()[k];
            thin.push(i);
        }
    }
    assert!(thin.len() <= 16, "too many thin unknowns for enumeration");
    let m = interior.len();
    let scale = a.amax() * (1.0 + b.amax());
    for subset in 0u32..(1 << thin.len()) {
        let active: Vec<usize> = (0..thin.len()).filter(|&j| subset >> j & 1 == 1).map(|j| thin[j]).collect();
        let free: Vec<usize> = (0..m).filter(|i| !active.contains(i)).collect();
        let mut v = DVector::zeros(m);
        for &i in &active {
            v[i] = obstacle[i];
        }
        let aff = DMatrix::from_fn(free.len(), free.len(), |r, c| a[(free[r], free[c])]);
        let rhs = DVector::from_fn(free.len(), |r, _| {
            b[free[r]] - active.iter().map(|&j| a[(free[r], j)] * obstacle[j]).sum::<f64>()
        });
        let Some(sol) = aff.lu().solve(&rhs) else { continue };
        for (r, &i) in free.iter().enumerate() {
            v[i] = sol[r];
        }
        let mult = &a * &v - &b;
        let feasible = thin.iter().all(|&i| v[i] >= obstacle[i] - 1e-12 * (1.0 + obstacle[i].abs()));
        let signs = active.iter().all(|&i| mult[i] >= -1e-12 * scale);
        if feasible && signs {
            let mut full = vec![0.0; grid.len()];
            for (&n, &g) in grid.boundary_nodes().iter().zip(problem.boundary()) {
                full[n] = g;
            }
            for (i, &n) in interior.iter().enumerate() {
                full[n] = v[i];
            }
            return full;
        }
    }
    panic!("no active set satisfies the complementarity conditions");
}

type Lateral = BTreeMap<Vec<u32>, f64>;

fn lateral_laplacian(q: &Lateral) -> Lateral {
    let mut out = Lateral::new();
    for (alpha, &c) in q {
        for i in 0..alpha.len() {
            if alpha[i] >= 2 {
                let mut beta = alpha.clone();
                beta[i] -= 2;
                *out.entry(beta).or_insert(0.0) += c * f64::from(alpha[i] * (alpha[i] - 1));
            }
        }
    }
    out
}

/// Even-in-`z` `L_a`-harmonic extension of the lateral polynomial `q`:
/// `sum_j c_j(x') z^(2j)` with `c_0 = q`, `c_j = -Lap' c_(j-1) / (2j (2j-1+a))`.
pub fn trace_extension(dimension: usize, a: f64, q: &[(Vec<u32>, f64)]) -> APolynomial {
    let mut c: Lateral = q.iter().cloned().collect();
    let mut terms = Vec::new();
    let mut j = 0u32;
    while !c.is_empty() {
        for (alpha, &v) in &c {
            if v != 0.0 {
                terms.push((Monomial::new(alpha.clone(), 2 * j), v));
            }
        }
        j += 1;
        let denom = f64::from(2 * j) * (f64::from(2 * j) - 1.0 + a);
        c = lateral_laplacian(&c).into_iter().map(|(k, v)| (k, -v / denom)).collect();
        c.retain(|_, v| *v != 0.0);
    }
    APolynomial::from_terms(dimension, terms).unwrap()
}

/// `L_a p = Lap p + (a/z) p_z` by central differences, `z > 0`.
pub fn la_by_differences(p: &APolynomial, a: f64, x: &[f64], h: f64) -> f64 {
    let f = |y: &[f64]| p.evaluate(y).unwrap();
    let d = x.len();
    let mut lap = 0.0;
    let mut dz = 0.0;
    for i in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        lap += (f(&xp) - 2.0 * f(x) + f(&xm)) / (h * h);
        if i == d - 1 {
            dz = (f(&xp) - f(&xm)) / (2.0 * h);
        }
    }
    lap + a / x[d - 1] * dz
}

/// `int_{S^(N-1)} |(x, z) - (r theta, 0)|^(-s) dtheta` for `|x| = rho`, reduced to one
/// angle and integrated by composite Simpson.
pub fn sphere_average_brute(n: usize, rho: f64, z: f64, r: f64, s: f64) -> f64 {
    // area of the unit sphere in R^(N-1)
    let k = (n - 1) as f64;
    let inner = 2.0 * std::f64::consts::PI.powf(k / 2.0) / gamma(k / 2.0);
    let m = 200_000;
    let h = std::f64::consts::PI / m as f64;
    let f = |phi: f64| {
        let d2 = rho * rho + r * r + z * z - 2.0 * rho * r * phi.cos();
        d2.powf(-s / 2.0) * phi.sin().powi(n as i32 - 2)
    };
    let mut acc = f(0.0) + f(std::f64::consts::PI);
    for i in 1..m {
        acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    inner * acc * h / 3.0
}

/// Random thin obstacle problem with at most 12 thin nodes and 200 nodes.
pub fn tiny_problem(rng: &mut ChaCha8Rng, a: f64) -> ThinObstacleProblem {
    let spec = match rng.gen_range(0..4) {
        0 => GridSpec::new(1, 1.0, 9, a, GridMode::FullTensor),
        1 => GridSpec::new(1, 1.0, 11, a, GridMode::FullTensor),
        2 => GridSpec::new(2, 1.0, 13, a, GridMode::Axisymmetric),
        _ => GridSpec::new(3, 1.0, 21, a, GridMode::Axisymmetric),
    };
    let grid = build_grid(spec).unwrap();
    let obstacle = (0..grid.thin_nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let boundary = (0..grid.boundary_nodes().len()).map(|_| rng.gen_range(0.0..0.3)).collect();
    ThinObstacleProblem::new(&grid, obstacle, boundary).unwrap()
}
