use std::path::{Path, PathBuf};

use fraclab_core::apoly::{self, APolynomial, Monomial, TermDoc};
use fraclab_core::obstacle_solver::{suggested_omega, SolverParams, SweepOrder};
use fraclab_core::potential::ExtractionMethod;
use fraclab_core::smap::Numerics;
use fraclab_core::weighted_grid::{GridMode, GridSpec, WeightedGrid};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub half_extent: f64,
    pub nodes_per_axis: usize,
    #[serde(default = "default_mode")]
    pub mode: GridMode,
    #[serde(default = "one")]
    pub z_grading: f64,
}

fn default_mode() -> GridMode {
    GridMode::Axisymmetric
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Relaxation factor; tuned to the grid when absent.
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_sweep")]
    pub sweep_order: SweepOrder,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    200_000
}

fn default_sweep() -> SweepOrder {
    SweepOrder::Lexicographic
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { omega: None, tol: default_tol(), max_iter: default_max_iter(), sweep_order: default_sweep() }
    }
}

/// Asymptotic polynomial of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolynomialSpec {
    /// `|x'|^2 + c - (N/(1+a)) z^2`.
    Radial { c: f64 },
    /// `x'^T A x' + c - (tr A/(1+a)) z^2`.
    Quadratic {
        #[serde(rename = "A")]
        matrix: Vec<Vec<f64>>,
        c: f64,
    },
    Terms { terms: Vec<TermDoc> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseConfig {
    #[serde(default = "default_inverse_extraction")]
    pub extraction: ExtractionMethod,
    #[serde(default = "default_annulus")]
    pub fit_annulus: [f64; 2],
    #[serde(default = "default_degree")]
    pub fit_degree: usize,
}

fn default_inverse_extraction() -> ExtractionMethod {
    ExtractionMethod::DiscreteFlux
}

fn default_annulus() -> [f64; 2] {
    [0.5, 0.75]
}

fn default_degree() -> usize {
    apoly::MAX_BASIS_DEGREE
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self { extraction: default_inverse_extraction(), fit_annulus: default_annulus(), fit_degree: default_degree() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_cases")]
    pub comparison_cases: usize,
    /// Grid for the decay and barrier checks; defaults to the base grid with
    /// `L` and the node count scaled up.
    #[serde(default)]
    pub decay_grid: Option<GridConfig>,
    /// Worker slots for independent experiments.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_cases() -> usize {
    10
}

fn default_workers() -> usize {
    1
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { comparison_cases: default_cases(), decay_grid: None, workers: default_workers() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(rename = "N")]
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub polynomial: PolynomialSpec,
    #[serde(default)]
    pub inverse: InverseConfig,
    #[serde(default)]
    pub contact_tol: Option<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub suite: SuiteConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.weight_a()?;
        Ok(cfg)
    }

    /// `a`, or `1 - 2s`; exactly one of the two must be given.
    pub fn weight_a(&self) -> Result<f64, ConfigError> {
        match (self.a, self.s) {
            (Some(a), None) => Ok(a),
            (None, Some(s)) => {
                if !(s > 0.0 && s < 1.0) {
                    return Err(ConfigError::Invalid(format!("s must lie in (0, 1), got {s}")));
                }
                Ok(1.0 - 2.0 * s)
            }
            _ => Err(ConfigError::Invalid("exactly one of \"a\" and \"s\" must be given".into())),
        }
    }

    pub fn grid_spec(&self, grid: &GridConfig) -> Result<GridSpec, ConfigError> {
        let spec = GridSpec {
            z_grading: grid.z_grading,
            ..GridSpec::new(self.dimension, grid.half_extent, grid.nodes_per_axis, self.weight_a()?, grid.mode)
        };
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    /// Base grid refined `refine` times.
    pub fn base_spec(&self, refine: u32) -> Result<GridSpec, ConfigError> {
        let mut spec = self.grid_spec(&self.grid)?;
        for _ in 0..refine {
            spec = spec.refined();
        }
        Ok(spec)
    }

    /// Larger box for the far-field checks.
    pub fn decay_spec(&self, refine: u32) -> Result<GridSpec, ConfigError> {
        let grid = self.suite.decay_grid.clone().unwrap_or_else(|| GridConfig {
            half_extent: 4.0 * self.grid.half_extent,
            nodes_per_axis: 2 * self.grid.nodes_per_axis - 1,
            ..self.grid.clone()
        });
        let mut spec = self.grid_spec(&grid)?;
        for _ in 0..refine {
            spec = spec.refined();
        }
        Ok(spec)
    }

    pub fn solver_params(&self, spec: &GridSpec) -> Result<SolverParams, ConfigError> {
        let omega = match self.solver.omega {
            Some(w) => w,
            None => {
                let grid = WeightedGrid::new(spec.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                suggested_omega(&grid)
            }
        };
        let p = SolverParams { omega, tol: self.solver.tol, max_iter: self.solver.max_iter, sweep_order: self.solver.sweep_order };
        p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(p)
    }

    pub fn numerics(&self, spec: &GridSpec, seed: u64) -> Result<Numerics, ConfigError> {
        let mut n = Numerics::new(spec.clone(), self.solver_params(spec)?);
        n.contact_tol = self.contact_tol;
        n.inverse_extraction = self.inverse.extraction;
        n.fit_annulus = self.inverse.fit_annulus;
        n.fit_degree = self.inverse.fit_degree;
        n.seed = seed;
        Ok(n)
    }

    pub fn polynomial(&self) -> Result<APolynomial, ConfigError> {
        let a = self.weight_a()?;
        let n = self.dimension;
        let invalid = |e: fraclab_core::Error| ConfigError::Invalid(e.to_string());
        match &self.polynomial {
            PolynomialSpec::Radial { c } => {
                let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
                apoly::quadratic_member(n, a, &eye, *c, true).map_err(invalid)
            }
            PolynomialSpec::Quadratic { matrix, c } => apoly::quadratic_member(n, a, matrix, *c, true).map_err(invalid),
            PolynomialSpec::Terms { terms } => {
                let mut p = APolynomial::zero(n);
                for t in terms {
                    if t.alpha.len() != n {
                        return Err(ConfigError::Invalid(format!("term {:?} does not have {n} lateral exponents", t.alpha)));
                    }
                    if t.k % 2 != 0 {
                        return Err(ConfigError::Invalid(format!("term with odd z exponent {}", t.k)));
                    }
                    p.add_term(Monomial::new(t.alpha.clone(), t.k), t.coef);
                }
                Ok(p)
            }
        }
    }

    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("fraclab_out").join(&self.name))
    }
}
