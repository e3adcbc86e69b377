use std::path::PathBuf;

use fraclab_core::apoly::{APolynomial, Monomial, PolynomialDoc};
use fraclab_core::obstacle_solver::{
    comparison_run, complementarity_residual, solve_linear, solve_psor, uniqueness_probe, LinearProblem, SolverParams,
    ThinObstacleProblem,
};
use fraclab_core::potential::{calibrate_alpha, decay_exponent_fit, Calibration, CalibrationCache};
use fraclab_core::smap::{
    barrier_check, coefficient_error, growth_scan_extended, injectivity_probe, inverse_s_map, roundtrip_level, s_map,
    GlobalSolutionApprox,
};
use fraclab_core::verify::{convexity_suite, decay_window, diagonal_values, epsilon_grid, hessian_decay_probe, Check, CheckResult, VerificationReport, REPORT_SCHEMA_VERSION};
use fraclab_core::weighted_grid::{build_grid, Field, GridSpec};
use fraclab_core::{io, Error as CoreError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ConfigError, ExperimentConfig};

/// Environment variable overriding the calibration cache location.
pub const CACHE_ENV: &str = "FRACLAB_CACHE";

// suite stages share the cache file
static CACHE_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Calibrate,
    Solve,
    Smap,
    Invert,
    Roundtrip,
    Convexity,
    Comparison,
    Decay,
    Suite,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Solve => "solve",
            Command::Smap => "smap",
            Command::Invert => "invert",
            Command::Roundtrip => "roundtrip",
            Command::Convexity => "convexity",
            Command::Comparison => "comparison",
            Command::Decay => "decay",
            Command::Suite => "suite",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub refine: u32,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(CoreError),
    #[error("check failed: {0}")]
    Check(CoreError),
    #[error(transparent)]
    Core(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NotConverged { .. } | CoreError::NonFinite { .. } | CoreError::CalibrationSpread { .. } | CoreError::RankDeficient { .. } => {
                CliError::Numerical(e)
            }
            CoreError::MaskTouchesBoundary | CoreError::BoxTooSmall(_) => CliError::Check(e),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    /// 1 check failure, 2 configuration error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Numerical(_) => 3,
            CliError::Config(_) | CliError::Usage(_) | CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandReport {
    pub schema_version: u32,
    pub command: Command,
    pub experiment: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub data: serde_json::Value,
}

impl CommandReport {
    /// Exit code for a completed run: 0 when every check passed and names its anchor.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else if self.checks.iter().any(|c| c.name.ends_with("numerical_failure")) {
            3
        } else {
            1
        }
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    refine: u32,
    seed: u64,
    deterministic: bool,
}

impl Ctx<'_> {
    fn cache_path(&self) -> PathBuf {
        std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| self.out.join("calibration_cache.json"))
    }

    fn cached(&self, spec: &GridSpec) -> CliResult<Option<Calibration>> {
        let _guard = CACHE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        Ok(CalibrationCache::load(&self.cache_path())?.lookup(spec).cloned())
    }

    fn store(&self, cal: &Calibration) -> CliResult<()> {
        let _guard = CACHE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.cache_path();
        let mut cache = CalibrationCache::load(&path)?;
        cache.insert(cal.clone());
        cache.save(&path)?;
        Ok(())
    }

    fn calibrate(&self, spec: &GridSpec) -> CliResult<Calibration> {
        log::info!("calibrating alpha for N={}, a={}, n={}, L={}", spec.dimension, spec.weight_a, spec.nodes_per_axis, spec.half_extent);
        let grid = build_grid(spec.clone())?;
        let cal = calibrate_alpha(&grid, &self.cfg.solver_params(spec)?)?;
        self.store(&cal)?;
        Ok(cal)
    }

    fn ensure_alpha(&self, spec: &GridSpec) -> CliResult<Calibration> {
        match self.cached(spec)? {
            Some(c) => Ok(c),
            None => self.calibrate(spec),
        }
    }

    fn require_alpha(&self, spec: &GridSpec) -> CliResult<Calibration> {
        self.cached(spec)?.ok_or_else(|| {
            CliError::Usage(format!(
                "no calibration for N={}, a={}, h={}, L={} in {}; run `fraclab calibrate` first",
                spec.dimension,
                spec.weight_a,
                spec.spacing(),
                spec.half_extent,
                self.cache_path().display()
            ))
        })
    }

    fn dir(&self, command: Command) -> CliResult<PathBuf> {
        let d = self.out.join(command.name());
        std::fs::create_dir_all(&d).map_err(CoreError::from)?;
        Ok(d)
    }

    fn finish(&self, command: Command, mut checks: Vec<CheckResult>, data: serde_json::Value) -> CliResult<CommandReport> {
        if self.deterministic {
            for c in &mut checks {
                c.runtime_ms = 0.0;
            }
        }
        let passed = !checks.is_empty() && checks.iter().all(|c| c.passed && !c.anchor.trim().is_empty());
        let report = CommandReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command,
            experiment: self.cfg.name.clone(),
            passed,
            checks,
            data,
        };
        io::write_json(&self.dir(command)?.join("report.json"), &report)?;
        Ok(report)
    }
}

/// Runs one command; the report is also written to `<out>/<command>/report.json`.
pub fn run(command: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<CommandReport> {
    let ctx = Ctx {
        cfg,
        out: cfg.output_dir(opts.out.as_deref()),
        refine: opts.refine,
        seed: opts.seed.unwrap_or(cfg.seed),
        deterministic: opts.deterministic,
    };
    std::fs::create_dir_all(&ctx.out).map_err(CoreError::from)?;
    io::write_json(&ctx.out.join("config.json"), cfg)?;
    let (checks, data) = match command {
        Command::Calibrate => cmd_calibrate(&ctx)?,
        Command::Solve => cmd_solve(&ctx)?,
        Command::Smap => cmd_smap(&ctx)?,
        Command::Invert => cmd_invert(&ctx)?,
        Command::Roundtrip => cmd_roundtrip(&ctx)?,
        Command::Convexity => cmd_convexity(&ctx)?,
        Command::Comparison => cmd_comparison(&ctx)?,
        Command::Decay => cmd_decay(&ctx)?,
        Command::Suite => cmd_suite(&ctx)?,
    };
    ctx.finish(command, checks, data)
}

type Stage = (Vec<CheckResult>, serde_json::Value);

fn prefixed(prefix: &str, checks: Vec<CheckResult>) -> Vec<CheckResult> {
    checks.into_iter().map(|c| CheckResult { name: format!("{prefix}/{}", c.name), ..c }).collect()
}

fn cmd_calibrate(ctx: &Ctx) -> CliResult<Stage> {
    let base = ctx.cfg.base_spec(ctx.refine)?;
    let mut checks = Vec::new();
    let check = Check::start("alpha_positive", "alpha_{N+1+a} > 0");
    let c0 = ctx.calibrate(&base)?;
    checks.push(check.finish(-c0.alpha, 0.0, format!("alpha = {:.6e}, spread = {:.3e}", c0.alpha, c0.spread)));
    let check = Check::start("self_convergence", "alpha is a property of the operator, not of the grid");
    let c1 = ctx.calibrate(&base.refined())?;
    let change = (c1.alpha - c0.alpha).abs() / c0.alpha;
    checks.push(check.finish(change, 0.02, format!("refined alpha = {:.6e}", c1.alpha)));
    if base.dimension == 2 && base.weight_a == 0.0 {
        let check = Check::start("newtonian_anchor", "Newtonian kernel |x|^-1 / (4 pi) in R^3");
        let newton = 1.0 / (4.0 * std::f64::consts::PI);
        checks.push(check.finish((c0.alpha - newton).abs() / newton, 0.05, format!("alpha = {:.6e}", c0.alpha)));
    }
    io::write_json(&ctx.dir(Command::Calibrate)?.join("calibration.json"), &[&c0, &c1])?;
    Ok((checks, json!({ "base": c0, "refined": c1, "cache": ctx.cache_path() })))
}

fn cmd_solve(ctx: &Ctx) -> CliResult<Stage> {
    let spec = ctx.cfg.base_spec(ctx.refine)?;
    let params = ctx.cfg.solver_params(&spec)?;
    let grid = build_grid(spec)?;
    let p = ctx.cfg.polynomial()?;
    let problem = ThinObstacleProblem::from_polynomial(&grid, &p)?;
    let check = Check::start("converged", "v >= psi, L_a v <= 0, L_a v = 0 off contact");
    let report = solve_psor(&problem, &params, None)?;
    let summary = report.summary();
    let tol = params.residual_tol();
    let worst = summary.pde_residual_off_contact.max(summary.multiplier_sign_violation).max(summary.obstacle_violation);
    let mut checks = vec![check.finish_with(report.converged, worst, tol, format!("{} sweeps", report.iterations))];
    let check = Check::start("solution_bounds", "0 <= v_p <= max(0, max psi)");
    let max_psi = problem.obstacle().iter().cloned().fold(0.0f64, f64::max);
    let v = report.solution.values();
    let below = v.iter().fold(0.0f64, |m, &x| m.max(-x));
    let above = v.iter().fold(0.0f64, |m, &x| m.max(x - max_psi));
    checks.push(check.finish(below.max(above), tol, ""));
    let mask = fraclab_core::obstacle_solver::coincidence_mask(&report.solution, &problem, problem.default_contact_tol());
    let dir = ctx.dir(Command::Solve)?;
    io::write_field_bin(&dir.join("v.bin"), &report.solution)?;
    io::write_field_csv(&dir.join("v.csv"), &report.solution)?;
    io::write_mask_csv(&dir.join("mask.csv"), &mask)?;
    Ok((checks, json!({ "solve": summary, "mask_count": mask.count(), "support_radius": mask.support_radius() })))
}

/// Residual battery, thin-plane sign and barrier checks of a forward solution.
fn solution_checks(sol: &GlobalSolutionApprox, params: &SolverParams, cal: Option<&Calibration>) -> CliResult<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let tol = params.residual_tol();
    let check = Check::start("mask_bounded", "the coincidence set is bounded");
    checks.push(check.finish_with(!sol.mask.touches_boundary(), sol.mask.support_radius(), sol.grid().half_extent(), ""));
    let check = Check::start("residuals", "L_a u <= 0, L_a u = 0 off the contact set");
    let problem = ThinObstacleProblem::from_polynomial(sol.grid(), &sol.p)?;
    let r = complementarity_residual(&sol.v, &problem, sol.contact_tol)?;
    checks.push(check.finish(r.pde_residual_off_contact.max(r.multiplier_sign_violation), tol, ""));
    let check = Check::start("thin_nonnegative", "u >= 0 on the thin plane");
    let min = sol.u.restrict_to_thin_plane().iter().cloned().fold(f64::INFINITY, f64::min);
    checks.push(check.finish(-min, tol, ""));
    if let Some(cal) = cal {
        let check = Check::start("barrier", "0 <= v_p <= w_c");
        let b = barrier_check(sol, &cal.riesz_params(), 400)?;
        checks.push(check.finish_with(
            b.lower_violation <= tol && b.upper_violation <= tol && b.probes >= 50,
            b.lower_violation.max(b.upper_violation),
            tol,
            format!("{} probes, c = {:.4e}", b.probes, b.c),
        ));
    }
    Ok(checks)
}

fn cmd_smap(ctx: &Ctx) -> CliResult<Stage> {
    let spec = ctx.cfg.base_spec(ctx.refine)?;
    let cal = ctx.require_alpha(&spec)?;
    let numerics = ctx.cfg.numerics(&spec, ctx.seed)?;
    let p = ctx.cfg.polynomial()?;
    let sol = s_map(&p, &numerics)?;
    let checks = solution_checks(&sol, &numerics.solver, Some(&cal))?;
    let dir = ctx.dir(Command::Smap)?;
    io::save_fields(&dir, &sol.u, &sol.v, &sol.mask, &sol.density)?;
    io::write_field_csv(&dir.join("u.csv"), &sol.u)?;
    io::write_json(&dir.join("config.json"), ctx.cfg)?;
    Ok((
        checks,
        json!({
            "solve": sol.solve_report.summary(),
            "mask_count": sol.mask.count(),
            "support_radius": sol.mask.support_radius(),
            "contact_tol": sol.contact_tol,
            "max_abs_density": sol.density.max_abs(),
            "alpha": cal.alpha,
        }),
    ))
}

fn cmd_invert(ctx: &Ctx) -> CliResult<Stage> {
    let dir = ctx.out.join(Command::Smap.name());
    if !dir.join("u.bin").exists() {
        return Err(CliError::Usage(format!("no persisted solution in {}; run `fraclab smap` first", dir.display())));
    }
    let saved = io::load_fields(&dir)?;
    let spec = saved.u.grid().spec().clone();
    let cal = ctx.require_alpha(&spec)?;
    let numerics = ctx.cfg.numerics(&spec, ctx.seed)?;
    let check = Check::start("coefficient_error", "u - v = p with L_a p = 0");
    let (p_hat, report) = inverse_s_map(&saved.u, &saved.mask, &cal.riesz_params(), &numerics)?;
    let p = ctx.cfg.polynomial()?;
    let err = coefficient_error(&p, &p_hat);
    let doc = PolynomialDoc::from_polynomial(&p_hat, spec.weight_a);
    io::write_json(&ctx.dir(Command::Invert)?.join("p_hat.json"), &doc)?;
    Ok((vec![check.finish(err, 0.10, format!("far-field rms {:.3e}", report.far_field_rms))], json!({ "fitted": doc, "inverse": report })))
}

/// Growth checks of a degree-2 solution: passes `m = 2` with `C = 2 scale(p)`,
/// fails `m = 1` for every `C <= 1e3` once the scan reaches far enough.
fn growth_checks(sol: &GlobalSolutionApprox, cal: &Calibration) -> CliResult<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let riesz = cal.riesz_params();
    let check = Check::start("growth_m2", "|u(x)| <= C (1 + |x|^2)");
    let c2 = 2.0 * sol.p.scale();
    let g2 = growth_scan_extended(sol, &riesz, 2, 1e6)?;
    checks.push(check.finish(g2.ratio, c2, format!("scanned to |x| = {:.1e}", g2.max_radius)));
    let check = Check::start("growth_m1_fails", "quadratic growth is not linear growth");
    let g1 = growth_scan_extended(sol, &riesz, 1, 1e6)?;
    checks.push(check.finish_with(g1.ratio > 1e3, g1.ratio, 1e3, "passes when the ratio exceeds C = 1e3"));
    Ok(checks)
}

fn cmd_roundtrip(ctx: &Ctx) -> CliResult<Stage> {
    let base = ctx.cfg.base_spec(ctx.refine)?;
    let p = ctx.cfg.polynomial()?;
    let mut checks = Vec::new();
    let mut levels = Vec::new();
    let mut errors = Vec::new();
    for (i, spec) in [base.clone(), base.refined()].into_iter().enumerate() {
        let cal = ctx.ensure_alpha(&spec)?;
        let numerics = ctx.cfg.numerics(&spec, ctx.seed)?;
        let check = Check::start("coefficient_error", "S(p) = p + v_p is a bijection");
        let (sol, rep) = roundtrip_level(&p, &numerics, &cal.riesz_params())?;
        let label = if i == 0 { "base" } else { "refined" };
        checks.push(CheckResult { name: format!("{label}/coefficient_error"), ..check.finish(rep.coefficient_error, 0.10, format!("h = {}", rep.h)) });
        if i == 0 {
            checks.extend(prefixed("base", growth_checks(&sol, &cal)?));
            let check = Check::start("injectivity", "S(p) != S(q) for p != q");
            let q = p.add(&APolynomial::from_terms(p.dimension(), [(Monomial::constant(p.dimension()), -0.25)])?)?;
            let inj = injectivity_probe(&p, &q, &numerics, &cal.riesz_params())?;
            checks.push(check.finish_with(inj.distinct, inj.distance, 3.0 * inj.noise, "coefficient distance vs 3x fit error"));
        }
        errors.push(rep.coefficient_error);
        levels.push(rep);
    }
    let check = Check::start("refinement_improves", "roundtrip error shrinks with h");
    checks.push(check.finish_with(errors[1] < errors[0], errors[1], errors[0], ""));
    Ok((checks, json!({ "levels": levels })))
}

fn cmd_convexity(ctx: &Ctx) -> CliResult<Stage> {
    let base = ctx.cfg.base_spec(ctx.refine)?;
    let p = ctx.cfg.polynomial()?;
    let mut checks = Vec::new();
    let mut eps = Vec::new();
    for (label, spec) in [("base", base.clone()), ("refined", base.refined())] {
        let numerics = ctx.cfg.numerics(&spec, ctx.seed)?;
        let sol = s_map(&p, &numerics)?;
        let report = convexity_suite(&sol, &[], numerics.solver.tol)?;
        eps.push(epsilon_grid(&sol, numerics.solver.tol));
        checks.extend(prefixed(label, report.checks));
    }
    let check = Check::start("eps_grid_shrinks", "convexity holds exactly in the continuum");
    checks.push(check.finish_with(eps[1] < eps[0], eps[1], eps[0], ""));
    Ok((checks, json!({ "eps_grid": eps })))
}

/// Uniform random values in `[lo, hi)`.
fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn cmd_comparison(ctx: &Ctx) -> CliResult<Stage> {
    let spec = ctx.cfg.base_spec(ctx.refine)?;
    let params = ctx.cfg.solver_params(&spec)?;
    let grid = build_grid(spec.clone())?;
    let p = ctx.cfg.polynomial()?;
    let base = ThinObstacleProblem::from_polynomial(&grid, &p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let nb = grid.boundary_nodes().len();
    let tol = params.residual_tol();
    let mut checks = Vec::new();

    let check = Check::start("comparison", "u_1 <= u_2 when the boundary data are ordered");
    let mut worst = 0.0f64;
    let mut all_converged = true;
    for _ in 0..ctx.cfg.suite.comparison_cases.max(1) {
        let g1 = random_vec(&mut rng, nb, 0.0, 0.1);
        let gap = rng.gen_range(0.0..0.2);
        let g2: Vec<f64> = g1.iter().map(|g| g + gap * rng.gen_range(0.5..1.0)).collect();
        let r = comparison_run(&base.with_boundary(g1)?, &base.with_boundary(g2)?, &params)?;
        worst = worst.max(r.order_violation).max(r.upper_violation);
        all_converged &= r.converged;
    }
    checks.push(check.finish_with(all_converged && worst <= tol, worst, tol, format!("{} cases", ctx.cfg.suite.comparison_cases.max(1))));

    let check = Check::start("uniqueness", "v_p <= v <= v_p + eps");
    let inits = vec![
        Field::zeros(&grid),
        Field::constant(&grid, 10.0),
        Field::from_values(&grid, random_vec(&mut rng, grid.len(), 0.0, 10.0))?,
    ];
    let u = uniqueness_probe(&base, &params, &inits)?;
    checks.push(check.finish_with(u.all_converged && u.max_pairwise_deviation <= 1e-6, u.max_pairwise_deviation, 1e-6, ""));

    checks.push(max_principle_check(&spec, &params, &mut rng)?);
    Ok((checks, json!({ "cases": ctx.cfg.suite.comparison_cases })))
}

/// Twenty obstacle-free solves with random boundary data on a coarse copy of
/// the grid; extrema must sit on the boundary.
fn max_principle_check(spec: &GridSpec, params: &SolverParams, rng: &mut ChaCha8Rng) -> CliResult<CheckResult> {
    let check = Check::start("maximum_principle", "max and min of L_a-harmonic functions lie on the boundary");
    let coarse = GridSpec { nodes_per_axis: spec.nodes_per_axis.min(33), ..spec.clone() };
    let grid = build_grid(coarse)?;
    let mut worst = 0.0f64;
    let mut converged = true;
    for _ in 0..20 {
        let g = random_vec(rng, grid.boundary_nodes().len(), -1.0, 1.0);
        let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        let r = solve_linear(&LinearProblem::homogeneous(&grid, g)?, &SolverParams { tol: 1e-12, ..params.clone() }, None)?;
        converged &= r.converged;
        for &n in grid.interior_nodes() {
            let v = r.solution.values()[n];
            worst = worst.max(v - hi).max(lo - v);
        }
    }
    let m = grid.m_matrix_check();
    Ok(check.finish_with(converged && m.is_m_matrix && worst <= 0.0, worst, 0.0, format!("M-matrix: {}", m.is_m_matrix)))
}

fn cmd_decay(ctx: &Ctx) -> CliResult<Stage> {
    let spec = ctx.cfg.decay_spec(ctx.refine)?;
    let cal = ctx.ensure_alpha(&spec)?;
    let numerics = ctx.cfg.numerics(&spec, ctx.seed)?;
    let p = ctx.cfg.polynomial()?;
    let sol = s_map(&p, &numerics)?;
    let mut checks = solution_checks(&sol, &numerics.solver, Some(&cal))?;
    let n = spec.dimension as f64;
    let target = -(n - 1.0 + spec.weight_a);
    let check = Check::start("potential_decay", "v_p(x) ~ |x|^-(N-1+a)");
    if sol.mask.is_empty() {
        checks.push(check.finish_with(true, f64::NAN, 0.15, "skipped: v vanishes identically"));
    } else {
        let (r0, r1) = decay_window(&sol);
        let fit = decay_exponent_fit(&diagonal_values(&sol.v, r0, r1))?;
        checks.push(check.finish(
            (fit.exponent / target - 1.0).abs(),
            0.15,
            format!("exponent {:.4} vs {target:.4} on [{r0:.3}, {r1:.3}], R^2 = {:.5}", fit.exponent, fit.r_squared),
        ));
    }
    checks.extend(hessian_decay_probe(&sol, None)?.checks);
    Ok((checks, json!({ "grid": spec, "alpha": cal.alpha, "mask_count": sol.mask.count() })))
}

fn cmd_trivial(ctx: &Ctx) -> CliResult<Stage> {
    let spec = ctx.cfg.base_spec(ctx.refine)?;
    let numerics = ctx.cfg.numerics(&spec, ctx.seed)?;
    let p = ctx.cfg.polynomial()?;
    // lift the constant until -p <= 0 on the thin plane
    let shift = (0.0f64).max(-p.thin_trace().coeff(&Monomial::constant(p.dimension()))) + 1.0;
    let trivial = p.add(&APolynomial::constant(p.dimension(), shift))?;
    let check = Check::start("trivial_branch", "-p <= 0 on the thin plane implies v_p = 0");
    let sol = s_map(&trivial, &numerics)?;
    let max_v = sol.v.max_abs();
    Ok((
        vec![check.finish_with(max_v <= 1e-8 && sol.mask.is_empty(), max_v, 1e-8, format!("{} masked nodes", sol.mask.count()))],
        json!({ "shift": shift }),
    ))
}

#[derive(Debug, Clone, Copy)]
enum SuiteStage {
    Trivial,
    Smap,
    Roundtrip,
    Convexity,
    Comparison,
    Decay,
}

fn cmd_suite(ctx: &Ctx) -> CliResult<Stage> {
    let mut checks = Vec::new();
    let mut data = serde_json::Map::new();
    let (c, d) = stage_result("calibrate", cmd_calibrate(ctx));
    checks.extend(c);
    data.insert("calibrate".into(), d);
    let stages = [SuiteStage::Trivial, SuiteStage::Smap, SuiteStage::Roundtrip, SuiteStage::Convexity, SuiteStage::Comparison, SuiteStage::Decay];
    let workers = if ctx.deterministic { 1 } else { ctx.cfg.suite.workers.max(1) };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<(Vec<CheckResult>, serde_json::Value)> = pool.install(|| {
        stages
            .par_iter()
            .map(|&stage| {
                let (name, r) = match stage {
                    SuiteStage::Trivial => ("trivial", cmd_trivial(ctx)),
                    SuiteStage::Smap => ("smap", smap_stage(ctx)),
                    SuiteStage::Roundtrip => ("roundtrip", cmd_roundtrip(ctx)),
                    SuiteStage::Convexity => ("convexity", cmd_convexity(ctx)),
                    SuiteStage::Comparison => ("comparison", cmd_comparison(ctx)),
                    SuiteStage::Decay => ("decay", cmd_decay(ctx)),
                };
                let (c, d) = stage_result(name, r);
                (c, json!({ name: d }))
            })
            .collect()
    });
    for (c, d) in results {
        checks.extend(c);
        if let serde_json::Value::Object(m) = d {
            data.extend(m);
        }
    }
    let mut report = VerificationReport::default();
    for c in checks {
        report.push(c);
    }
    Ok((report.checks, serde_json::Value::Object(data)))
}

/// Forward map with calibration on demand; fails the check instead of
/// erroring when the box is too small.
fn smap_stage(ctx: &Ctx) -> CliResult<Stage> {
    let spec = ctx.cfg.base_spec(ctx.refine)?;
    let cal = ctx.ensure_alpha(&spec)?;
    let numerics = ctx.cfg.numerics(&spec, ctx.seed)?;
    let p = ctx.cfg.polynomial()?;
    let sol = s_map(&p, &numerics)?;
    let checks = solution_checks(&sol, &numerics.solver, Some(&cal))?;
    let dir = ctx.dir(Command::Smap)?;
    io::save_fields(&dir, &sol.u, &sol.v, &sol.mask, &sol.density)?;
    Ok((checks, json!({ "mask_count": sol.mask.count(), "support_radius": sol.mask.support_radius() })))
}

/// Prefixes the stage's checks, or turns its error into a failed check.
fn stage_result(name: &str, r: CliResult<Stage>) -> (Vec<CheckResult>, serde_json::Value) {
    match r {
        Ok((c, d)) => (prefixed(name, c), d),
        Err(e) => {
            let kind = match &e {
                CliError::Numerical(_) => "numerical_failure",
                CliError::Check(CoreError::MaskTouchesBoundary) => "mask_bounded",
                CliError::Check(_) => "box_large_enough",
                _ => "error",
            };
            let check = Check::start(kind, "the experiment runs to completion");
            (vec![CheckResult { name: format!("{name}/{kind}"), ..check.finish_with(false, f64::NAN, 0.0, e.to_string()) }], json!({ "error": e.to_string() }))
        }
    }
}
