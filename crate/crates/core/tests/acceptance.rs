//! Acceptance battery. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Tolerances are pinned below.

mod common;

use std::time::Instant;

use common::{lcp_by_enumeration, tiny_problem};
use fraclab_core::apoly::APolynomial;
use fraclab_core::obstacle_solver::{comparison_run, solve_linear, solve_psor, uniqueness_probe, LinearProblem, SolverParams, ThinObstacleProblem};
use fraclab_core::potential::{calibrate_alpha, decay_exponent_fit, RieszParams};
use fraclab_core::smap::{barrier_check, growth_scan_extended, radial_quadratic, roundtrip, roundtrip_level, s_map, Numerics};
use fraclab_core::verify::{convexity_suite, decay_window, diagonal_values, epsilon_grid};
use fraclab_core::weighted_grid::{build_grid, Field, GridMode, GridSpec};
use fraclab_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const WEIGHTS: [f64; 3] = [-0.5, 0.0, 0.5];

const ORACLE_INSTANCES: usize = 30;
const ORACLE_TOL: f64 = 1e-7;
const TRIVIAL_TOL: f64 = 1e-8;
const NEWTON_TOL: f64 = 0.05;
const SELF_CONVERGENCE_TOL: f64 = 0.02;
const ROUNDTRIP_TOL: f64 = 0.10;
const MIN_BARRIER_PROBES: usize = 50;
const DECAY_TOL: f64 = 0.15;
const COMPARISON_CASES: usize = 12;
const UNIQUENESS_TOL: f64 = 1e-6;
const MAX_PRINCIPLE_SOLVES: usize = 20;
const GROWTH_C1: f64 = 1e3;

/// Solver tolerance of the forward and calibration solves.
const SOLVER_TOL: f64 = 1e-10;
/// Half width and node count of the base grid (129 stored radial nodes).
const BASE_L: f64 = 8.0;
const BASE_N: usize = 257;
/// Far-field grid of the decay and barrier checks.
const DECAY_L: f64 = 32.0;
const DECAY_N: usize = 513;

struct Outcome {
    passed: bool,
    measured: f64,
    tolerance: f64,
    note: String,
}

impl Outcome {
    fn new(passed: bool, measured: f64, tolerance: f64, note: impl Into<String>) -> Self {
        Self { passed, measured, tolerance, note: note.into() }
    }
}

fn params(spec: &GridSpec) -> SolverParams {
    let grid = build_grid(spec.clone()).unwrap();
    SolverParams { tol: SOLVER_TOL, ..SolverParams::tuned(&grid) }
}

fn axisym(n_dim: usize, l: f64, n: usize, a: f64) -> GridSpec {
    GridSpec::new(n_dim, l, n, a, GridMode::Axisymmetric)
}

fn numerics(spec: GridSpec) -> Numerics {
    let p = params(&spec);
    Numerics::new(spec, p)
}

fn riesz_for(spec: &GridSpec) -> Result<RieszParams> {
    let grid = build_grid(spec.clone())?;
    Ok(calibrate_alpha(&grid, &params(spec))?.riesz_params())
}

fn oracle_equivalence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let problems: Vec<ThinObstacleProblem> = (0..ORACLE_INSTANCES).map(|i| tiny_problem(&mut rng, WEIGHTS[i % 3])).collect();
    let mut worst = 0.0f64;
    let mut ok = true;
    for problem in &problems {
        let grid = problem.grid();
        ok &= grid.thin_nodes().len() <= 12 && grid.len() <= 200;
        let exact = lcp_by_enumeration(problem);
        let report = solve_psor(problem, &SolverParams { tol: 1e-13, ..SolverParams::default() }, None)?;
        ok &= report.converged;
        worst = report.solution.values().iter().zip(&exact).fold(worst, |m, (x, y)| m.max((x - y).abs()));
    }
    Ok(Outcome::new(ok && worst <= ORACLE_TOL, worst, ORACLE_TOL, format!("{ORACLE_INSTANCES} instances")))
}

fn trivial_branch() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut masked = 0;
    for a in WEIGHTS {
        // |x'|^2 + 1 - (3/(1+a)) z^2 is positive on the thin plane
        let p = radial_quadratic(3, a)?.add(&APolynomial::constant(3, 2.0))?;
        let sol = s_map(&p, &numerics(axisym(3, BASE_L, 129, a)))?;
        worst = worst.max(sol.v.max_abs());
        masked += sol.mask.count();
    }
    Ok(Outcome::new(worst <= TRIVIAL_TOL && masked == 0, worst, TRIVIAL_TOL, format!("{masked} masked nodes")))
}

fn newtonian_calibration() -> Result<Outcome> {
    let base = GridSpec::new(2, BASE_L, 65, 0.0, GridMode::FullTensor);
    let a0 = riesz_for(&base)?.alpha;
    let a1 = riesz_for(&base.refined())?.alpha;
    let newton = 1.0 / (4.0 * std::f64::consts::PI);
    let err = (a0 / newton - 1.0).abs();
    let change = (a1 / a0 - 1.0).abs();
    Ok(Outcome::new(
        err <= NEWTON_TOL && change <= SELF_CONVERGENCE_TOL,
        err,
        NEWTON_TOL,
        format!("alpha {a0:.6e} -> {a1:.6e}, refinement change {change:.2e} (limit {SELF_CONVERGENCE_TOL})"),
    ))
}

fn roundtrip_bijection() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut notes = Vec::new();
    for a in WEIGHTS {
        let study = roundtrip(&radial_quadratic(3, a)?, &numerics(axisym(3, BASE_L, BASE_N, a)), riesz_for)?;
        let (e0, e1) = (study.levels[0].coefficient_error, study.levels[1].coefficient_error);
        ok &= e0 <= ROUNDTRIP_TOL && study.improved;
        worst = worst.max(e0);
        notes.push(format!("a={a}: {e0:.2e} -> {e1:.2e}"));
    }
    Ok(Outcome::new(ok, worst, ROUNDTRIP_TOL, notes.join(", ")))
}

fn barrier_and_decay() -> Result<Outcome> {
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for a in WEIGHTS {
        let spec = axisym(3, DECAY_L, DECAY_N, a);
        let riesz = riesz_for(&spec)?;
        let num = numerics(spec);
        let sol = s_map(&radial_quadratic(3, a)?, &num)?;
        let tol = num.solver.tol;
        let b = barrier_check(&sol, &riesz, 400)?;
        ok &= b.probes >= MIN_BARRIER_PROBES && b.lower_violation <= tol && b.upper_violation <= tol;
        let (r0, r1) = decay_window(&sol);
        let fit = decay_exponent_fit(&diagonal_values(&sol.v, r0, r1))?;
        let target = -(2.0 + a);
        let rel = (fit.exponent / target - 1.0).abs();
        ok &= rel <= DECAY_TOL;
        worst = worst.max(rel);
        notes.push(format!(
            "a={a}: exponent {:.3} vs {target}, {} probes, barrier violations {:.1e}/{:.1e}",
            fit.exponent, b.probes, b.lower_violation, b.upper_violation
        ));
    }
    Ok(Outcome::new(ok, worst, DECAY_TOL, notes.join("; ")))
}

fn comparison_principle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut tol = 0.0;
    for i in 0..COMPARISON_CASES {
        let a = WEIGHTS[i % 3];
        let spec = axisym(3, BASE_L, 65, a);
        let grid = build_grid(spec.clone())?;
        let base = ThinObstacleProblem::from_polynomial(&grid, &radial_quadratic(3, a)?)?;
        let nb = grid.boundary_nodes().len();
        let g1: Vec<f64> = (0..nb).map(|_| rng.gen_range(0.0..0.1)).collect();
        let g2: Vec<f64> = g1.iter().map(|g| g + rng.gen_range(0.0..0.2)).collect();
        let p = params(&spec);
        tol = p.residual_tol();
        let r = comparison_run(&base.with_boundary(g1)?, &base.with_boundary(g2)?, &p)?;
        ok &= r.converged;
        worst = worst.max(r.order_violation);
    }
    Ok(Outcome::new(ok && worst <= tol, worst, tol, format!("{COMPARISON_CASES} cases")))
}

fn convexity() -> Result<Outcome> {
    let mut ok = true;
    let mut worst = f64::NEG_INFINITY;
    let mut notes = Vec::new();
    for a in WEIGHTS {
        let p = radial_quadratic(3, a)?;
        let mut eps = Vec::new();
        for spec in [axisym(3, BASE_L, BASE_N, a), axisym(3, BASE_L, BASE_N, a).refined()] {
            let num = numerics(spec);
            let sol = s_map(&p, &num)?;
            let report = convexity_suite(&sol, &[], num.solver.tol)?;
            ok &= report.all_passed();
            for c in &report.checks {
                worst = worst.max(c.measured - c.tolerance);
            }
            eps.push(epsilon_grid(&sol, num.solver.tol));
        }
        ok &= eps[1] < eps[0];
        notes.push(format!("a={a}: eps {:.3e} -> {:.3e}", eps[0], eps[1]));
    }
    Ok(Outcome::new(ok, worst, 0.0, format!("measured is max(measured - eps); {}", notes.join(", "))))
}

fn uniqueness() -> Result<Outcome> {
    let spec = axisym(3, BASE_L, 129, 0.0);
    let grid = build_grid(spec.clone())?;
    let problem = ThinObstacleProblem::from_polynomial(&grid, &radial_quadratic(3, 0.0)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.0..10.0)).collect();
    let inits = vec![Field::zeros(&grid), Field::constant(&grid, 10.0), Field::from_values(&grid, random)?];
    let r = uniqueness_probe(&problem, &params(&spec), &inits)?;
    Ok(Outcome::new(
        r.all_converged && r.max_pairwise_deviation <= UNIQUENESS_TOL,
        r.max_pairwise_deviation,
        UNIQUENESS_TOL,
        "inits 0, 10, random",
    ))
}

fn maximum_principle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for i in 0..MAX_PRINCIPLE_SOLVES {
        let a = rng.gen_range(-0.9..0.9);
        let spec = if i % 2 == 0 { axisym(3, 2.0, 33, a) } else { GridSpec::new(2, 2.0, 17, a, GridMode::FullTensor) };
        let grid = build_grid(spec)?;
        ok &= grid.m_matrix_check().is_m_matrix;
        let g: Vec<f64> = (0..grid.boundary_nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        let r = solve_linear(&LinearProblem::homogeneous(&grid, g)?, &SolverParams { tol: 1e-12, ..SolverParams::tuned(&grid) }, None)?;
        ok &= r.converged;
        for &n in grid.interior_nodes() {
            let v = r.solution.values()[n];
            worst = worst.max(v - hi).max(lo - v);
        }
    }
    Ok(Outcome::new(ok && worst <= 0.0, worst, 0.0, "largest interior excess over the boundary range"))
}

fn growth() -> Result<Outcome> {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut worst_m1 = f64::INFINITY;
    for a in WEIGHTS {
        let spec = axisym(3, BASE_L, BASE_N, a);
        let riesz = riesz_for(&spec)?;
        let p = radial_quadratic(3, a)?;
        let (sol, _) = roundtrip_level(&p, &numerics(spec), &riesz)?;
        let c2 = 2.0 * p.scale();
        let g2 = growth_scan_extended(&sol, &riesz, 2, 1e6)?;
        let g1 = growth_scan_extended(&sol, &riesz, 1, 1e6)?;
        ok &= g2.passes(c2) && !g1.passes(GROWTH_C1);
        worst_m1 = worst_m1.min(g1.ratio);
        notes.push(format!("a={a}: m=2 ratio {:.2} (C={c2}), m=1 ratio {:.2e}", g2.ratio, g1.ratio));
    }
    Ok(Outcome::new(ok, worst_m1, GROWTH_C1, notes.join("; ")))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Result<Outcome>)> = vec![
        ("1 oracle equivalence", oracle_equivalence),
        ("2 trivial branch", trivial_branch),
        ("3 newtonian calibration", newtonian_calibration),
        ("4 roundtrip", roundtrip_bijection),
        ("5 barrier and decay", barrier_and_decay),
        ("6 comparison principle", comparison_principle),
        ("7 convexity suite", convexity),
        ("8 uniqueness", uniqueness),
        ("9 maximum principle", maximum_principle),
        ("10 degree-growth", growth),
    ];
    let results: Vec<(Result<Outcome>, f64)> = criteria
        .par_iter()
        .map(|(_, f)| {
            let t = Instant::now();
            (f(), t.elapsed().as_secs_f64())
        })
        .collect();
    let mut failed = Vec::new();
    for ((name, _), (r, secs)) in criteria.iter().zip(results) {
        match r {
            Ok(o) => {
                println!(
                    "{} {name}: measured {:.4e}, tolerance {:.4e}, {secs:.1}s; {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.measured,
                    o.tolerance,
                    o.note
                );
                if !o.passed {
                    failed.push(*name);
                }
            }
            Err(e) => {
                println!("FAIL {name}: error {e}, {secs:.1}s");
                failed.push(*name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
