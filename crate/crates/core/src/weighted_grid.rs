//! Finite-volume discretization of `L_a u = div(|z|^a grad u)`.
//!
//! Only the half space `z >= 0` is stored; the even reflection across the
//! thin plane `z = 0` is implicit. Nodes are vertices of a tensor grid and
//! every node owns the dual cell around it. The row of a node on the thin
//! plane covers the half cell `[0, z_1/2]`, so the assembled operator is
//! symmetric; divided by the (half) cell volume it equals the full reflected
//! cell average.
//!
//! Face weights:
//! * a face normal to `z` at height `z_f` carries `|z_f|^a` (midpoint rule);
//! * a face normal to a lateral or radial axis carries the exact integral
//!   of `|z|^a` over the z-extent of the face, so the first layer never
//!   evaluates `0^a`;
//! * in axisymmetric mode the radial measure `r^(N-1) dr` enters the same way.
//!
//! With this choice the quadratic a-harmonic polynomials
//! `x_i^2 - z^2/(1+a)` are reproduced without truncation error.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    FullTensor,
    Axisymmetric,
}

fn default_grading() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Dimension `N` of the thin plane.
    #[serde(rename = "N")]
    pub dimension: usize,
    /// The box is `[-L, L]^(N+1)`.
    pub half_extent: f64,
    /// Nodes along a full axis `[-L, L]`; must be odd so that `z = 0` is a layer.
    pub nodes_per_axis: usize,
    #[serde(rename = "a")]
    pub weight_a: f64,
    pub mode: GridMode,
    /// Ratio between consecutive z spacings (1 = uniform).
    #[serde(default = "default_grading")]
    pub z_grading: f64,
}

impl GridSpec {
    pub fn new(dimension: usize, half_extent: f64, nodes_per_axis: usize, weight_a: f64, mode: GridMode) -> Self {
        Self { dimension, half_extent, nodes_per_axis, weight_a, mode, z_grading: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::InvalidGrid("dimension N must be at least 1".into()));
        }
        if !(self.half_extent.is_finite() && self.half_extent > 0.0) {
            return Err(Error::InvalidGrid(format!("half extent must be positive, got {}", self.half_extent)));
        }
        if self.nodes_per_axis < 9 || self.nodes_per_axis % 2 == 0 {
            return Err(Error::InvalidGrid(format!(
                "nodes_per_axis must be odd and at least 9, got {}",
                self.nodes_per_axis
            )));
        }
        if !(self.weight_a > -1.0 && self.weight_a < 1.0) {
            return Err(Error::InvalidGrid(format!("weight exponent a must lie in (-1, 1), got {}", self.weight_a)));
        }
        if self.mode == GridMode::FullTensor && self.dimension > 2 {
            return Err(Error::InvalidGrid(format!(
                "full tensor grids support N <= 2 (got N = {}); use the axisymmetric mode",
                self.dimension
            )));
        }
        if !(self.z_grading.is_finite() && self.z_grading >= 1.0) {
            return Err(Error::InvalidGrid(format!("z grading ratio must be >= 1, got {}", self.z_grading)));
        }
        Ok(())
    }

    /// Nodes stored along a half axis `[0, L]`.
    pub fn half_nodes(&self) -> usize {
        (self.nodes_per_axis + 1) / 2
    }

    /// Uniform spacing of the lateral (or radial) axes.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_extent / (self.nodes_per_axis - 1) as f64
    }

    /// Halves the spacing on the same box.
    pub fn refined(&self) -> Self {
        Self { nodes_per_axis: 2 * self.nodes_per_axis - 1, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    Lateral,
    Radial,
    Vertical,
}

/// One-dimensional tables from which all stencil weights factorize.
#[derive(Debug, Clone)]
pub struct Axis {
    pub kind: AxisKind,
    pub coords: Vec<f64>,
    /// Weighted measure of each dual cell (`dx`, `r^(N-1) dr` or `|z|^a dz`).
    pub cell: Vec<f64>,
    /// Geometric measure of each dual cell (`dx`, `r^(N-1) dr` or `dz`).
    pub geometric: Vec<f64>,
    /// Transmissibility between node `i` and `i + 1`.
    pub face: Vec<f64>,
    pub dirichlet_low: bool,
    pub dirichlet_high: bool,
}

impl Axis {
    fn from_coords(kind: AxisKind, coords: Vec<f64>, n_dim: usize, a: f64) -> Self {
        let n = coords.len();
        let mids: Vec<f64> = coords.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let mut cell = Vec::with_capacity(n);
        let mut geometric = Vec::with_capacity(n);
        for i in 0..n {
            let lo = if i == 0 { coords[0] } else { mids[i - 1] };
            let hi = if i + 1 == n { coords[n - 1] } else { mids[i] };
            let (c, g) = match kind {
                AxisKind::Lateral => (hi - lo, hi - lo),
                AxisKind::Radial => {
                    let m = (hi.powi(n_dim as i32) - lo.powi(n_dim as i32)) / n_dim as f64;
                    (m, m)
                }
                AxisKind::Vertical => {
                    ((hi.powf(1.0 + a) - lo.powf(1.0 + a)) / (1.0 + a), hi - lo)
                }
            };
            cell.push(c);
            geometric.push(g);
        }
        let face = (0..n - 1)
            .map(|i| {
                let d = coords[i + 1] - coords[i];
                match kind {
                    AxisKind::Lateral => 1.0 / d,
                    AxisKind::Radial => mids[i].powi(n_dim as i32 - 1) / d,
                    AxisKind::Vertical => mids[i].powf(a) / d,
                }
            })
            .collect();
        let (dirichlet_low, dirichlet_high) = match kind {
            AxisKind::Lateral => (true, true),
            AxisKind::Radial | AxisKind::Vertical => (false, true),
        };
        Self { kind, coords, cell, geometric, face, dirichlet_low, dirichlet_high }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn is_dirichlet(&self, i: usize) -> bool {
        (self.dirichlet_low && i == 0) || (self.dirichlet_high && i + 1 == self.len())
    }
}

fn vertical_coords(m: usize, length: f64, ratio: f64) -> Vec<f64> {
    if (ratio - 1.0).abs() < 1e-15 {
        let h = length / (m - 1) as f64;
        return (0..m).map(|j| j as f64 * h).collect();
    }
    let intervals = (m - 1) as i32;
    let first = length * (ratio - 1.0) / (ratio.powi(intervals) - 1.0);
    let mut coords = Vec::with_capacity(m);
    let mut z = 0.0;
    let mut step = first;
    coords.push(0.0);
    for _ in 0..intervals {
        z += step;
        step *= ratio;
        coords.push(z);
    }
    coords[m - 1] = length;
    coords
}

/// Surface area of the unit sphere `S^(n-1)` in `R^n`.
pub fn unit_sphere_area(n: usize) -> f64 {
    // 2 pi^(n/2) / Gamma(n/2), with Gamma at integers and half integers
    let gamma_half = |k: usize| -> f64 {
        if k % 2 == 0 {
            (1..k / 2).map(|j| j as f64).product()
        } else {
            let mut g = std::f64::consts::PI.sqrt();
            let mut x = 0.5;
            while x < k as f64 / 2.0 - 0.25 {
                g *= x;
                x += 1.0;
            }
            g
        }
    };
    2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / gamma_half(n)
}

/// Result of the M-matrix structure check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MMatrixReport {
    pub min_coupling: f64,
    pub min_diagonal: f64,
    /// `min_i (diag_i - sum_j coupling_ij)` over interior rows.
    pub min_row_surplus: f64,
    pub is_m_matrix: bool,
}

/// Immutable grid handle with precomputed stencil weights.
#[derive(Debug)]
pub struct WeightedGrid {
    spec: GridSpec,
    axes: Vec<Axis>,
    dims: Vec<usize>,
    strides: Vec<usize>,
    couplings: Vec<f64>,
    diag: Vec<f64>,
    volume: Vec<f64>,
    boundary: Vec<bool>,
    thin_nodes: Vec<usize>,
    boundary_nodes: Vec<usize>,
    interior_nodes: Vec<usize>,
    colors: [Vec<usize>; 2],
}

/// Precomputes axis tables and stencil weights for `spec`.
pub fn build_grid(spec: GridSpec) -> Result<Arc<WeightedGrid>> {
    WeightedGrid::new(spec).map(Arc::new)
}

impl WeightedGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.nodes_per_axis;
        let m = spec.half_nodes();
        let l = spec.half_extent;
        let a = spec.weight_a;
        let mut axes = Vec::new();
        match spec.mode {
            GridMode::FullTensor => {
                let h = spec.spacing();
                for _ in 0..spec.dimension {
                    let coords = (0..n).map(|i| -l + i as f64 * h).collect();
                    axes.push(Axis::from_coords(AxisKind::Lateral, coords, spec.dimension, a));
                }
            }
            GridMode::Axisymmetric => {
                let h = spec.spacing();
                let coords = (0..m).map(|i| i as f64 * h).collect();
                axes.push(Axis::from_coords(AxisKind::Radial, coords, spec.dimension, a));
            }
        }
        axes.push(Axis::from_coords(
            AxisKind::Vertical,
            vertical_coords(m, l, spec.z_grading),
            spec.dimension,
            a,
        ));

        let dims: Vec<usize> = axes.iter().map(Axis::len).collect();
        let ndim = dims.len();
        let mut strides = vec![1usize; ndim];
        for k in (0..ndim - 1).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let len: usize = dims.iter().product();

        let mut couplings = vec![0.0; len * 2 * ndim];
        let mut diag = vec![0.0; len];
        let mut volume = vec![0.0; len];
        let mut boundary = vec![false; len];
        let mut thin_nodes = Vec::new();
        let mut boundary_nodes = Vec::new();
        let mut interior_nodes = Vec::new();
        let mut colors = [Vec::new(), Vec::new()];

        let mut idx = vec![0usize; ndim];
        for node in 0..len {
            let mut rem = node;
            for k in 0..ndim {
                idx[k] = rem / strides[k];
                rem %= strides[k];
            }
            let on_boundary = (0..ndim).any(|k| axes[k].is_dirichlet(idx[k]));
            boundary[node] = on_boundary;
            if idx[ndim - 1] == 0 {
                thin_nodes.push(node);
            }
            if on_boundary {
                boundary_nodes.push(node);
            } else {
                interior_nodes.push(node);
                colors[idx.iter().sum::<usize>() % 2].push(node);
            }
            volume[node] = (0..ndim).map(|k| axes[k].geometric[idx[k]]).product();
            let mut d = 0.0;
            for k in 0..ndim {
                let transverse: f64 = (0..ndim).filter(|&l| l != k).map(|l| axes[l].cell[idx[l]]).product();
                if idx[k] > 0 {
                    let w = axes[k].face[idx[k] - 1] * transverse;
                    couplings[node * 2 * ndim + 2 * k] = w;
                    d += w;
                }
                if idx[k] + 1 < dims[k] {
                    let w = axes[k].face[idx[k]] * transverse;
                    couplings[node * 2 * ndim + 2 * k + 1] = w;
                    d += w;
                }
            }
            diag[node] = d;
        }

        Ok(Self {
            spec,
            axes,
            dims,
            strides,
            couplings,
            diag,
            volume,
            boundary,
            thin_nodes,
            boundary_nodes,
            interior_nodes,
            colors,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mode(&self) -> GridMode {
        self.spec.mode
    }

    pub fn weight_a(&self) -> f64 {
        self.spec.weight_a
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    pub fn half_extent(&self) -> f64 {
        self.spec.half_extent
    }

    /// Lateral (or radial) node spacing.
    pub fn spacing(&self) -> f64 {
        self.spec.spacing()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Stride of the z axis (z is the fastest index).
    pub fn z_stride(&self) -> usize {
        1
    }

    pub fn z_coords(&self) -> &[f64] {
        &self.axes[self.ndim() - 1].coords
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rem = node;
        self.strides
            .iter()
            .map(|&s| {
                let i = rem / s;
                rem %= s;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Grid coordinates `(x', z)` or `(r, z)`.
    pub fn node_coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node).iter().zip(&self.axes).map(|(&i, ax)| ax.coords[i]).collect()
    }

    /// Embedding of the node into `R^(N+1)`; axisymmetric nodes sit on the `x_1` axis.
    pub fn physical_point(&self, node: usize) -> Vec<f64> {
        let c = self.node_coords(node);
        match self.spec.mode {
            GridMode::FullTensor => c,
            GridMode::Axisymmetric => {
                let mut p = vec![0.0; self.spec.dimension + 1];
                p[0] = c[0];
                p[self.spec.dimension] = c[1];
                p
            }
        }
    }

    /// Euclidean norm of the physical point of `node`.
    pub fn radius(&self, node: usize) -> f64 {
        self.node_coords(node).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    /// Nodes of the layer `z = 0`, in storage order.
    pub fn thin_nodes(&self) -> &[usize] {
        &self.thin_nodes
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    /// Interior nodes split by the parity of their multi-index.
    pub fn colors(&self) -> &[Vec<usize>; 2] {
        &self.colors
    }

    /// Position of a node in the thin-plane list, if it lies on `z = 0`.
    pub fn thin_position(&self, node: usize) -> Option<usize> {
        let mz = self.dims[self.ndim() - 1];
        (node % mz == 0).then_some(node / mz)
    }

    /// Node `layers` steps above `node` in z.
    pub fn node_above(&self, node: usize, layers: usize) -> usize {
        node + layers
    }

    /// Lateral grid coordinates of a thin-plane node (`x'` or `r`).
    pub fn thin_coords(&self, thin_pos: usize) -> Vec<f64> {
        let mut c = self.node_coords(self.thin_nodes[thin_pos]);
        c.pop();
        c
    }

    /// Reduced lateral measure of the dual cell of a thin node
    /// (`h^N`, or `int r^(N-1) dr` in axisymmetric mode).
    pub fn thin_reduced_measure(&self, thin_pos: usize) -> f64 {
        let idx = self.multi_index(self.thin_nodes[thin_pos]);
        (0..self.ndim() - 1).map(|k| self.axes[k].cell[idx[k]]).product()
    }

    /// `H^N` measure of the dual cell of a thin node.
    pub fn thin_cell_area(&self, thin_pos: usize) -> f64 {
        let reduced = self.thin_reduced_measure(thin_pos);
        match self.spec.mode {
            GridMode::FullTensor => reduced,
            GridMode::Axisymmetric => unit_sphere_area(self.spec.dimension) * reduced,
        }
    }

    /// Whether a thin node is a Dirichlet node or adjacent to one along the plane.
    pub fn thin_touches_boundary(&self, thin_pos: usize) -> bool {
        let idx = self.multi_index(self.thin_nodes[thin_pos]);
        (0..self.ndim() - 1).any(|k| {
            let ax = &self.axes[k];
            let n = ax.len();
            (ax.dirichlet_low && idx[k] <= 1) || (ax.dirichlet_high && idx[k] + 2 >= n)
        })
    }

    pub fn diag(&self, node: usize) -> f64 {
        self.diag[node]
    }

    pub fn volume(&self, node: usize) -> f64 {
        self.volume[node]
    }

    /// Neighbors of `node` with their (nonnegative) flux couplings.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let ndim = self.ndim();
        let row = &self.couplings[node * 2 * ndim..(node + 1) * 2 * ndim];
        (0..ndim).flat_map(move |k| {
            let s = self.strides[k];
            [(node.wrapping_sub(s), row[2 * k]), (node + s, row[2 * k + 1])]
                .into_iter()
                .filter(|&(_, w)| w > 0.0)
        })
    }

    /// `sum_j w_ij (u_j - u_i)`: the integral of `L_a u` over the (half) cell.
    #[inline]
    pub fn flux_sum(&self, values: &[f64], node: usize) -> f64 {
        let ndim = self.ndim();
        let row = &self.couplings[node * 2 * ndim..(node + 1) * 2 * ndim];
        let ui = values[node];
        let mut acc = 0.0;
        for k in 0..ndim {
            let s = self.strides[k];
            let (wl, wh) = (row[2 * k], row[2 * k + 1]);
            if wl > 0.0 {
                acc += wl * (values[node - s] - ui);
            }
            if wh > 0.0 {
                acc += wh * (values[node + s] - ui);
            }
        }
        acc
    }

    /// `sum_j w_ij u_j` over all neighbors.
    #[inline]
    pub fn neighbor_sum(&self, values: &[f64], node: usize) -> f64 {
        let ndim = self.ndim();
        let row = &self.couplings[node * 2 * ndim..(node + 1) * 2 * ndim];
        let mut acc = 0.0;
        for k in 0..ndim {
            let s = self.strides[k];
            let (wl, wh) = (row[2 * k], row[2 * k + 1]);
            if wl > 0.0 {
                acc += wl * values[node - s];
            }
            if wh > 0.0 {
                acc += wh * values[node + s];
            }
        }
        acc
    }

    /// Pointwise estimate of `L_a u` at an interior node.
    pub fn la_at(&self, values: &[f64], node: usize) -> f64 {
        self.flux_sum(values, node) / self.volume[node]
    }

    /// Checks nonnegative couplings and weak diagonal dominance of every interior row.
    pub fn m_matrix_check(&self) -> MMatrixReport {
        let mut min_coupling = f64::INFINITY;
        let mut min_diagonal = f64::INFINITY;
        let mut min_row_surplus = f64::INFINITY;
        for &node in &self.interior_nodes {
            let mut off = 0.0;
            for (_, w) in self.neighbors(node) {
                min_coupling = min_coupling.min(w);
                off += w;
            }
            min_diagonal = min_diagonal.min(self.diag[node]);
            min_row_surplus = min_row_surplus.min(self.diag[node] - off);
        }
        let scale = self.diag.iter().cloned().fold(0.0, f64::max);
        MMatrixReport {
            min_coupling,
            min_diagonal,
            min_row_surplus,
            is_m_matrix: min_coupling >= 0.0 && min_diagonal > 0.0 && min_row_surplus >= -1e-12 * scale,
        }
    }
}

/// Grid function on the stored half domain.
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<WeightedGrid>,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Arc<WeightedGrid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Arc<WeightedGrid>, c: f64) -> Self {
        Self { grid: Arc::clone(grid), values: vec![c; grid.len()] }
    }

    /// Samples `f` at the physical point (in `R^(N+1)`) of every node.
    pub fn from_fn(grid: &Arc<WeightedGrid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|n| f(&grid.physical_point(n))).collect();
        Self { grid: Arc::clone(grid), values }
    }

    pub fn from_values(grid: &Arc<WeightedGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), found: values.len() });
        }
        Ok(Self { grid: Arc::clone(grid), values })
    }

    pub fn grid(&self) -> &Arc<WeightedGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_same_grid(&self, other: &Field) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && self.grid.spec() != other.grid.spec() {
            return Err(Error::DimensionMismatch { expected: self.grid.len(), found: other.grid.len() });
        }
        Ok(())
    }

    /// `self - other`, node by node.
    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.check_same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Field { grid: Arc::clone(&self.grid), values })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.check_same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Field { grid: Arc::clone(&self.grid), values })
    }

    /// Max-norm distance to another field on the same grid.
    pub fn max_diff(&self, other: &Field) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Values on the `z = 0` layer (a radial profile in axisymmetric mode).
    pub fn restrict_to_thin_plane(&self) -> Vec<f64> {
        self.grid.thin_nodes().iter().map(|&n| self.values[n]).collect()
    }
}

/// Discrete `L_a field`: flux divergence per cell volume at interior nodes,
/// zero on Dirichlet nodes.
pub fn apply_la(grid: &WeightedGrid, field: &Field) -> Result<Field> {
    if field.values.len() != grid.len() || field.grid.spec() != grid.spec() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: field.values.len() });
    }
    let mut out = vec![0.0; grid.len()];
    for &node in grid.interior_nodes() {
        out[node] = grid.la_at(&field.values, node);
    }
    Ok(Field { grid: Arc::clone(&field.grid), values: out })
}

/// `div_(r,z)(r^(N-1) |z|^a grad field)` per reduced cell volume; requires an
/// axisymmetric grid. The axis `r = 0` carries a reflecting (Neumann) condition.
pub fn apply_la_axisym(grid: &WeightedGrid, field: &Field) -> Result<Field> {
    if grid.mode() != GridMode::Axisymmetric {
        return Err(Error::InvalidGrid("apply_la_axisym requires an axisymmetric grid".into()));
    }
    apply_la(grid, field)
}

/// Warns when the box is less than four obstacle-support radii wide.
pub fn check_truncation(grid: &WeightedGrid, support_radius: f64) -> bool {
    let ok = grid.half_extent() >= 4.0 * support_radius;
    if !ok {
        log::warn!(
            "box half extent {} is below 4x the obstacle support radius {}; far-field truncation error may dominate",
            grid.half_extent(),
            support_radius
        );
    }
    ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n_dim: usize, n: usize, l: f64, a: f64, mode: GridMode) -> Arc<WeightedGrid> {
        build_grid(GridSpec::new(n_dim, l, n, a, mode)).unwrap()
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(WeightedGrid::new(GridSpec::new(2, 1.0, 10, 0.0, GridMode::FullTensor)).is_err());
        assert!(WeightedGrid::new(GridSpec::new(2, 1.0, 7, 0.0, GridMode::FullTensor)).is_err());
        assert!(WeightedGrid::new(GridSpec::new(2, 1.0, 9, 1.0, GridMode::FullTensor)).is_err());
        assert!(WeightedGrid::new(GridSpec::new(2, 1.0, 9, -1.0, GridMode::FullTensor)).is_err());
        assert!(WeightedGrid::new(GridSpec::new(2, 0.0, 9, 0.0, GridMode::FullTensor)).is_err());
        assert!(WeightedGrid::new(GridSpec::new(3, 1.0, 9, 0.0, GridMode::FullTensor)).is_err());
        assert!(WeightedGrid::new(GridSpec::new(3, 1.0, 9, 0.0, GridMode::Axisymmetric)).is_ok());
    }

    #[test]
    fn unweighted_stencil_has_equal_faces() {
        let g = grid(2, 9, 1.0, 0.0, GridMode::FullTensor);
        let h = g.spacing();
        for &node in g.interior_nodes() {
            let z = g.node_coords(node)[2];
            for (nb, w) in g.neighbors(node) {
                // half cells on the thin plane carry half the transverse area
                let dz = g.node_coords(nb)[2] - z;
                let expected = if z == 0.0 && dz == 0.0 { h * h / h / 2.0 } else { h };
                assert_relative_eq!(w, expected, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn midpoint_weight_of_first_z_face() {
        let g = grid(2, 33, 8.0, 0.5, GridMode::FullTensor);
        let h = g.spacing();
        let node = g.thin_nodes()[g.thin_nodes().len() / 2];
        let w = g.neighbors(node).find(|&(nb, _)| nb == node + 1).unwrap().1;
        // transmissibility = (h/2)^a * face area / h
        assert_relative_eq!(w, (h / 2.0).powf(0.5) * h * h / h, max_relative = 1e-14);
    }

    #[test]
    fn unit_sphere_areas() {
        use std::f64::consts::PI;
        assert_relative_eq!(unit_sphere_area(1), 2.0);
        assert_relative_eq!(unit_sphere_area(2), 2.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_area(3), 4.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_area(4), 2.0 * PI * PI, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_area(5), 8.0 * PI * PI / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn constant_field_has_zero_residual() {
        for mode in [GridMode::FullTensor, GridMode::Axisymmetric] {
            for a in [-0.5, 0.0, 0.5] {
                let g = grid(2, 11, 2.0, a, mode);
                let f = Field::constant(&g, 3.0);
                let r = apply_la(&g, &f).unwrap();
                assert!(r.max_abs() < 1e-10, "mode {mode:?} a {a}: {}", r.max_abs());
            }
        }
    }

    #[test]
    fn quadratic_a_harmonic_is_reproduced() {
        for a in [-0.5, 0.0, 0.5] {
            let g = grid(2, 17, 2.0, a, GridMode::FullTensor);
            let f = Field::from_fn(&g, |x| x[0] * x[0] - x[2] * x[2] / (1.0 + a));
            assert!(apply_la(&g, &f).unwrap().max_abs() < 1e-9);
            let g = grid(3, 17, 2.0, a, GridMode::Axisymmetric);
            let f = Field::from_fn(&g, |x| x[0] * x[0] - 3.0 / (1.0 + a) * x[3] * x[3]);
            assert!(apply_la_axisym(&g, &f).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn harmonic_quadratic_at_a_zero() {
        let g = grid(2, 17, 1.0, 0.0, GridMode::FullTensor);
        let f = Field::from_fn(&g, |x| x[0] * x[0] + x[1] * x[1] - 2.0 * x[2] * x[2]);
        assert!(apply_la(&g, &f).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn axisym_requires_axisym_grid() {
        let g = grid(2, 9, 1.0, 0.0, GridMode::FullTensor);
        let f = Field::zeros(&g);
        assert!(apply_la_axisym(&g, &f).is_err());
    }

    #[test]
    fn restriction_to_thin_plane() {
        let g = grid(2, 9, 1.0, 0.0, GridMode::FullTensor);
        assert!(Field::constant(&g, 3.0).restrict_to_thin_plane().iter().all(|&v| v == 3.0));
        let f = Field::from_fn(&g, |x| x[0] * x[0] + x[1] * x[1] - 1.0 - 2.0 * x[2] * x[2]);
        for (k, v) in f.restrict_to_thin_plane().iter().enumerate() {
            let c = g.thin_coords(k);
            assert_relative_eq!(*v, c[0] * c[0] + c[1] * c[1] - 1.0, epsilon = 1e-14);
        }
        let g = grid(3, 9, 1.0, 0.0, GridMode::Axisymmetric);
        assert_eq!(Field::zeros(&g).restrict_to_thin_plane().len(), 5);
    }

    #[test]
    fn grid_is_an_m_matrix() {
        for a in [-0.9, -0.5, 0.0, 0.5, 0.9] {
            for mode in [GridMode::FullTensor, GridMode::Axisymmetric] {
                let report = grid(2, 13, 3.0, a, mode).m_matrix_check();
                assert!(report.is_m_matrix, "{report:?}");
            }
        }
    }

    #[test]
    fn operator_is_symmetric() {
        let g = grid(2, 9, 1.0, -0.5, GridMode::FullTensor);
        for node in 0..g.len() {
            for (nb, w) in g.neighbors(node) {
                let back = g.neighbors(nb).find(|&(x, _)| x == node).unwrap().1;
                assert_relative_eq!(w, back, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn graded_z_axis_reaches_the_box_top() {
        let mut spec = GridSpec::new(3, 4.0, 17, 0.3, GridMode::Axisymmetric);
        spec.z_grading = 1.2;
        let g = WeightedGrid::new(spec).unwrap();
        let z = g.z_coords();
        assert_eq!(z.len(), 9);
        assert_relative_eq!(z[8], 4.0);
        assert!(z[1] < 0.5);
        let f = Field::from_fn(&Arc::new(g), |x| x[0] * x[0] - 3.0 / 1.3 * x[3] * x[3]);
        let r = apply_la(f.grid(), &f).unwrap();
        assert!(r.max_abs() < 1e-9);
    }
}
