//! Polynomials in `(x', z)` that are even in `z`, the reduced operator
//! `Δ' + ∂_zz + (a/z) ∂_z`, a-harmonic bases and membership certificates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest degree handled by [`a_harmonic_basis`].
pub const MAX_BASIS_DEGREE: usize = 4;

/// Threshold on the normalized sphere minimum of the leading form.
pub const POSITIVITY_DELTA: f64 = 1e-9;

/// `x'^alpha z^k`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial {
    pub alpha: Vec<u32>,
    pub k: u32,
}

impl Monomial {
    pub fn new(alpha: Vec<u32>, k: u32) -> Self {
        Self { alpha, k }
    }

    pub fn constant(dimension: usize) -> Self {
        Self { alpha: vec![0; dimension], k: 0 }
    }

    pub fn degree(&self) -> u32 {
        self.alpha.iter().sum::<u32>() + self.k
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let n = self.alpha.len();
        let mut v = x[n].powi(self.k as i32);
        for (xi, &e) in x.iter().zip(&self.alpha) {
            if e > 0 {
                v *= xi.powi(e as i32);
            }
        }
        v
    }
}

/// Real polynomial on `R^(N+1)`; the last variable is `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct APolynomial {
    dimension: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl APolynomial {
    pub fn zero(dimension: usize) -> Self {
        Self { dimension, terms: BTreeMap::new() }
    }

    pub fn constant(dimension: usize, c: f64) -> Self {
        let mut p = Self::zero(dimension);
        p.add_term(Monomial::constant(dimension), c);
        p
    }

    pub fn from_terms(dimension: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Result<Self> {
        let mut p = Self::zero(dimension);
        for (m, c) in terms {
            if m.alpha.len() != dimension {
                return Err(Error::DimensionMismatch { expected: dimension, found: m.alpha.len() });
            }
            p.add_term(m, c);
        }
        Ok(p)
    }

    /// Adds `c * m`, dropping the entry if it cancels to zero.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.alpha.len(), self.dimension);
        let entry = self.terms.entry(m.clone()).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.remove(&m);
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn terms(&self) -> &BTreeMap<Monomial, f64> {
        &self.terms
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Largest absolute coefficient.
    pub fn scale(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn is_even_in_z(&self) -> bool {
        self.terms.keys().all(|m| m.k % 2 == 0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut p = Self::zero(self.dimension);
        for (m, c) in &self.terms {
            p.add_term(m.clone(), s * c);
        }
        p
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if other.dimension != self.dimension {
            return Err(Error::DimensionMismatch { expected: self.dimension, found: other.dimension });
        }
        let mut p = self.clone();
        for (m, c) in &other.terms {
            p.add_term(m.clone(), *c);
        }
        Ok(p)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(-1.0))
    }

    /// Zeroes coefficients with `|c| < rel * scale()`.
    pub fn pruned(&self, rel: f64) -> Self {
        let cut = rel * self.scale();
        let mut p = Self::zero(self.dimension);
        for (m, c) in &self.terms {
            if c.abs() >= cut {
                p.add_term(m.clone(), *c);
            }
        }
        p
    }

    /// Value at `x = (x', z)`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dimension + 1 {
            return Err(Error::DimensionMismatch { expected: self.dimension + 1, found: x.len() });
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.eval(x)).sum()
    }

    /// Value at `(x', 0)`.
    pub fn evaluate_thin(&self, xp: &[f64]) -> Result<f64> {
        if xp.len() != self.dimension {
            return Err(Error::DimensionMismatch { expected: self.dimension, found: xp.len() });
        }
        let mut x = xp.to_vec();
        x.push(0.0);
        Ok(self.eval_unchecked(&x))
    }

    /// `q(x') = p(x', 0)` as a polynomial with no z-dependence.
    pub fn thin_trace(&self) -> Self {
        let mut q = Self::zero(self.dimension);
        for (m, c) in self.terms.iter().filter(|(m, _)| m.k == 0) {
            q.add_term(m.clone(), *c);
        }
        q
    }

    pub fn homogeneous_part(&self, degree: u32) -> Self {
        let mut q = Self::zero(self.dimension);
        for (m, c) in self.terms.iter().filter(|(m, _)| m.degree() == degree) {
            q.add_term(m.clone(), *c);
        }
        q
    }

    /// Partial derivative with respect to `x_i` (`i < N`) or `z` (`i == N`).
    pub fn derivative(&self, i: usize) -> Self {
        let mut d = Self::zero(self.dimension);
        for (m, c) in &self.terms {
            let e = if i == self.dimension { m.k } else { m.alpha[i] };
            if e == 0 {
                continue;
            }
            let mut m2 = m.clone();
            if i == self.dimension {
                m2.k -= 1;
            } else {
                m2.alpha[i] -= 1;
            }
            d.add_term(m2, c * e as f64);
        }
        d
    }

    /// Whether `p(x', z)` depends on `x'` only through `|x'|`, tested at
    /// random rotations.
    pub fn is_radial(&self, tol: f64) -> bool {
        let n = self.dimension;
        if n == 1 {
            return self.terms.keys().all(|m| m.alpha[0] % 2 == 0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scale = self.scale().max(1.0);
        for _ in 0..32 {
            let r: f64 = rng.gen_range(0.1..2.0);
            let z: f64 = rng.gen_range(-1.0..1.0);
            let dir = random_unit(&mut rng, n);
            let mut x: Vec<f64> = dir.iter().map(|d| d * r).collect();
            x.push(z);
            let mut y = vec![0.0; n + 1];
            y[0] = r;
            y[n] = z;
            if (self.eval_unchecked(&x) - self.eval_unchecked(&y)).abs() > tol * scale {
                return false;
            }
        }
        true
    }
}

impl fmt::Display for APolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            let sign = if *c < 0.0 { "-" } else { "+" };
            if first {
                if *c < 0.0 {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            first = false;
            let mut factors = Vec::new();
            for (i, &e) in m.alpha.iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(format!("x{}", i + 1)),
                    _ => factors.push(format!("x{}^{}", i + 1, e)),
                }
            }
            match m.k {
                0 => {}
                1 => factors.push("z".into()),
                k => factors.push(format!("z^{k}")),
            }
            let mag = c.abs();
            if factors.is_empty() {
                write!(f, "{mag}")?;
            } else if mag == 1.0 {
                write!(f, "{}", factors.join(" "))?;
            } else {
                write!(f, "{mag} {}", factors.join(" "))?;
            }
        }
        Ok(())
    }
}

/// Serialized polynomial: `{"N": .., "a": .., "terms": [{"alpha": [..], "k": .., "coef": ..}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialDoc {
    #[serde(rename = "N")]
    pub dimension: usize,
    pub a: f64,
    pub terms: Vec<TermDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermDoc {
    pub alpha: Vec<u32>,
    pub k: u32,
    pub coef: f64,
}

impl PolynomialDoc {
    pub fn from_polynomial(p: &APolynomial, a: f64) -> Self {
        let terms = p
            .terms()
            .iter()
            .map(|(m, c)| TermDoc { alpha: m.alpha.clone(), k: m.k, coef: *c })
            .collect();
        Self { dimension: p.dimension(), a, terms }
    }

    pub fn to_polynomial(&self) -> Result<APolynomial> {
        APolynomial::from_terms(
            self.dimension,
            self.terms.iter().map(|t| (Monomial::new(t.alpha.clone(), t.k), t.coef)),
        )
    }
}

/// Reduced operator with cancellation magnitudes per output monomial.
fn reduced_la_with_magnitude(p: &APolynomial, a: f64) -> Result<(APolynomial, BTreeMap<Monomial, f64>)> {
    let mut out = APolynomial::zero(p.dimension);
    let mut mag: BTreeMap<Monomial, f64> = BTreeMap::new();
    let mut push = |out: &mut APolynomial, m: Monomial, c: f64| {
        *mag.entry(m.clone()).or_insert(0.0) += c.abs();
        out.add_term(m, c);
    };
    for (m, &c) in &p.terms {
        if m.k % 2 == 1 {
            return Err(Error::SymmetryViolation { exponent: m.k });
        }
        for i in 0..p.dimension {
            let e = m.alpha[i];
            if e >= 2 {
                let mut m2 = m.clone();
                m2.alpha[i] -= 2;
                push(&mut out, m2, c * (e * (e - 1)) as f64);
            }
        }
        if m.k >= 2 {
            let k = m.k as f64;
            let mut m2 = m.clone();
            m2.k -= 2;
            push(&mut out, m2, c * (k * (k - 1.0) + a * k));
        }
    }
    Ok((out, mag))
}

/// `Δ'p + ∂_zz p + (a/z) ∂_z p`, which equals `|z|^(-a) L_a p` for `p` even in `z`.
pub fn reduced_la(p: &APolynomial, a: f64) -> Result<APolynomial> {
    reduced_la_with_magnitude(p, a).map(|(q, _)| q)
}

/// Whether `reduced_la(p, a)` vanishes, up to `1e-12` relative to the
/// magnitudes that cancel in each coefficient.
pub fn is_a_harmonic(p: &APolynomial, a: f64) -> Result<bool> {
    let (q, mag) = reduced_la_with_magnitude(p, a)?;
    Ok(q.terms.iter().all(|(m, c)| c.abs() <= 1e-12 * mag.get(m).copied().unwrap_or(0.0)))
}

/// Even-in-z monomials of total degree `<= degree`, ordered by descending
/// z-exponent and then by multi-index.
fn even_monomials(dimension: usize, degree: usize) -> Vec<Monomial> {
    fn alphas(n: usize, max: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=max {
            prefix.push(e);
            alphas(n, max - e, prefix, out);
            prefix.pop();
        }
    }
    let mut all = BTreeSet::new();
    for k in (0..=degree as u32).step_by(2) {
        let mut list = Vec::new();
        alphas(dimension, degree as u32 - k, &mut Vec::new(), &mut list);
        for alpha in list {
            all.insert((std::cmp::Reverse(k), alpha));
        }
    }
    all.into_iter().map(|(k, alpha)| Monomial { alpha, k: k.0 }).collect()
}

/// Basis of the null space of the reduced operator on even-in-z polynomials
/// of degree `<= max_degree`, by row reduction of its coefficient matrix.
///
/// Columns are ordered with z-powers first, so every free variable is a pure
/// `x'` monomial and the basis element for `x'^alpha` carries coefficient 1
/// there and 0 on every other pure `x'` monomial.
pub fn a_harmonic_basis(dimension: usize, a: f64, max_degree: usize) -> Result<Vec<APolynomial>> {
    if max_degree > MAX_BASIS_DEGREE {
        return Err(Error::UnsupportedDegree(max_degree));
    }
    let cols = even_monomials(dimension, max_degree);
    if max_degree < 2 {
        return Ok(cols
            .into_iter()
            .map(|m| APolynomial::from_terms(dimension, [(m, 1.0)]).expect("dimension matches"))
            .collect());
    }
    let rows = even_monomials(dimension, max_degree - 2);
    let row_index: BTreeMap<&Monomial, usize> = rows.iter().enumerate().map(|(i, m)| (m, i)).collect();
    let mut mat = DMatrix::<f64>::zeros(rows.len(), cols.len());
    for (j, m) in cols.iter().enumerate() {
        let single = APolynomial::from_terms(dimension, [(m.clone(), 1.0)])?;
        for (mi, c) in reduced_la(&single, a)?.terms() {
            mat[(row_index[mi], j)] = *c;
        }
    }

    // reduced row echelon form with partial pivoting
    let tol = 1e-12 * mat.amax().max(1.0);
    let mut pivot_cols = Vec::new();
    let mut r = 0;
    for j in 0..cols.len() {
        if r == rows.len() {
            break;
        }
        let (best, val) = (r..rows.len())
            .map(|i| (i, mat[(i, j)].abs()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if val <= tol {
            continue;
        }
        mat.swap_rows(r, best);
        let p = mat[(r, j)];
        for c in 0..cols.len() {
            mat[(r, c)] /= p;
        }
        for i in 0..rows.len() {
            if i != r {
                let f = mat[(i, j)];
                if f != 0.0 {
                    for c in 0..cols.len() {
                        mat[(i, c)] -= f * mat[(r, c)];
                    }
                }
            }
        }
        pivot_cols.push(j);
        r += 1;
    }

    let mut basis = Vec::new();
    for f in (0..cols.len()).filter(|j| !pivot_cols.contains(j)) {
        let mut p = APolynomial::zero(dimension);
        p.add_term(cols[f].clone(), 1.0);
        for (row, &pc) in pivot_cols.iter().enumerate() {
            let v = -mat[(row, f)];
            if v.abs() > tol {
                p.add_term(cols[pc].clone(), v);
            }
        }
        basis.push(p);
    }
    Ok(basis)
}

/// `p(x', z) = x'^T A x' + c - (tr A / (1 + a)) z^2`.
pub fn quadratic_member(dimension: usize, a: f64, matrix: &[Vec<f64>], c: f64, require_pd: bool) -> Result<APolynomial> {
    if matrix.len() != dimension || matrix.iter().any(|row| row.len() != dimension) {
        return Err(Error::InvalidMatrix(format!("expected a {dimension}x{dimension} matrix")));
    }
    let scale = matrix.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..dimension {
        for j in 0..i {
            if (matrix[i][j] - matrix[j][i]).abs() > 1e-12 * scale {
                return Err(Error::InvalidMatrix(format!("not symmetric at ({i}, {j})")));
            }
        }
    }
    if require_pd {
        let m = DMatrix::from_fn(dimension, dimension, |i, j| matrix[i][j]);
        if m.cholesky().is_none() {
            return Err(Error::InvalidMatrix("not positive definite".into()));
        }
    }
    let mut p = APolynomial::zero(dimension);
    let mut trace = 0.0;
    for i in 0..dimension {
        trace += matrix[i][i];
        for j in i..dimension {
            let mut alpha = vec![0; dimension];
            alpha[i] += 1;
            alpha[j] += 1;
            let coef = if i == j { matrix[i][i] } else { matrix[i][j] + matrix[j][i] };
            p.add_term(Monomial::new(alpha, 0), coef);
        }
    }
    p.add_term(Monomial::constant(dimension), c);
    p.add_term(Monomial::new(vec![0; dimension], 2), -trace / (1.0 + a));
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positivity {
    CertifiedPositive,
    CertifiedNot,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembershipReport {
    pub is_symmetric: bool,
    pub is_a_harmonic: bool,
    pub eventual_positivity: Positivity,
    pub witness: String,
    /// Normalized minimum of the leading thin form on the unit sphere.
    pub sphere_minimum: Option<f64>,
    pub witness_direction: Option<Vec<f64>>,
}

impl MembershipReport {
    pub fn is_member(&self) -> bool {
        self.is_symmetric && self.is_a_harmonic && self.eventual_positivity == Positivity::CertifiedPositive
    }
}

pub(crate) fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        // Box-Muller pairs
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sphere_samples(n: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..3600)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 3600.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let count = 6000;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    vec![r * t.cos(), y, r * t.sin()]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            (0..4000 * n).map(|_| random_unit(&mut rng, n)).collect()
        }
    }
}

/// Minimizes a homogeneous form (given on `R^N`) over the unit sphere by
/// dense sampling followed by projected gradient descent from the best samples.
fn sphere_minimum(form: &APolynomial) -> (f64, Vec<f64>) {
    let n = form.dimension;
    let eval = |d: &[f64]| form.evaluate_thin(d).expect("dimension matches");
    let mut samples: Vec<(f64, Vec<f64>)> = sphere_samples(n).into_iter().map(|d| (eval(&d), d)).collect();
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    if n == 1 {
        return samples.swap_remove(0);
    }
    let grads: Vec<APolynomial> = (0..n).map(|i| form.derivative(i).thin_trace()).collect();
    let mut best = samples[0].clone();
    for (mut val, mut d) in samples.into_iter().take(8) {
        let mut step = 0.1;
        for _ in 0..400 {
            let g: Vec<f64> = grads.iter().map(|gi| gi.evaluate_thin(&d).expect("dimension")).collect();
            let radial: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let tangent: Vec<f64> = g.iter().zip(&d).map(|(gi, di)| gi - radial * di).collect();
            if tangent.iter().map(|t| t * t).sum::<f64>().sqrt() < 1e-15 {
                break;
            }
            let mut moved = false;
            while step > 1e-14 {
                let trial: Vec<f64> = d.iter().zip(&tangent).map(|(di, ti)| di - step * ti).collect();
                let norm = trial.iter().map(|x| x * x).sum::<f64>().sqrt();
                let trial: Vec<f64> = trial.into_iter().map(|x| x / norm).collect();
                let tv = eval(&trial);
                if tv < val {
                    val = tv;
                    d = trial;
                    step *= 1.5;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if val < best.0 {
            best = (val, d);
        }
    }
    best
}

/// Checks symmetry, a-harmonicity and eventual positivity of `p(x', 0)`.
///
/// Eventual positivity is decided from the leading homogeneous form of the
/// thin trace: its minimum over the unit sphere (after scaling the form to
/// unit max coefficient) above `POSITIVITY_DELTA` certifies positivity, a
/// negative value below `-POSITIVITY_DELTA` certifies the opposite, and
/// anything in between is reported as inconclusive.
pub fn is_in_p0prime(p: &APolynomial, a: f64) -> MembershipReport {
    let is_symmetric = p.is_even_in_z();
    let harmonic = is_symmetric && is_a_harmonic(p, a).unwrap_or(false);
    let q = p.thin_trace();
    let mut report = MembershipReport {
        is_symmetric,
        is_a_harmonic: harmonic,
        eventual_positivity: Positivity::Inconclusive,
        witness: String::new(),
        sphere_minimum: None,
        witness_direction: None,
    };
    if q.is_zero() {
        report.eventual_positivity = Positivity::CertifiedNot;
        report.witness = "p vanishes identically on the thin plane".into();
        return report;
    }
    let d = q.degree();
    let lead = q.homogeneous_part(d);
    let lead = lead.scaled(1.0 / lead.scale());
    let (min, dir) = if d == 0 {
        (lead.coeff(&Monomial::constant(p.dimension)), vec![])
    } else {
        sphere_minimum(&lead)
    };
    report.sphere_minimum = Some(min);
    if min > POSITIVITY_DELTA {
        report.eventual_positivity = Positivity::CertifiedPositive;
        report.witness = format!("leading thin form of degree {d} has normalized sphere minimum {min:.6e}");
    } else if min < -POSITIVITY_DELTA {
        report.eventual_positivity = Positivity::CertifiedNot;
        report.witness = format!("leading thin form of degree {d} equals {min:.6e} in direction {dir:?}");
        report.witness_direction = Some(dir);
    } else {
        report.witness = format!("leading thin form of degree {d} has sphere minimum {min:.3e} within the undecidable band");
        report.witness_direction = Some(dir);
    }
    report
}

/// Least-squares projection of samples onto a span of polynomials.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub polynomial: APolynomial,
    pub coefficients: Vec<f64>,
    pub residual_rms: f64,
    pub data_rms: f64,
    pub condition_number: f64,
}

/// Fits `sum_j c_j basis_j` to `(point, value)` samples.
pub fn fit_a_harmonic(samples: &[(Vec<f64>, f64)], basis: &[APolynomial]) -> Result<FitResult> {
    let Some(first) = basis.first() else {
        return Err(Error::InvalidInput("empty basis".into()));
    };
    let dimension = first.dimension();
    if samples.len() < 2 * basis.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples for {} basis functions; at least twice as many are required",
            samples.len(),
            basis.len()
        )));
    }
    for (x, _) in samples {
        if x.len() != dimension + 1 {
            return Err(Error::DimensionMismatch { expected: dimension + 1, found: x.len() });
        }
    }
    let mut design = DMatrix::from_fn(samples.len(), basis.len(), |i, j| basis[j].eval_unchecked(&samples[i].0));
    let norms: Vec<f64> = design.column_iter().map(|c| c.norm()).collect();
    for (j, &nrm) in norms.iter().enumerate() {
        if nrm == 0.0 {
            return Err(Error::RankDeficient { rank: 0, needed: basis.len() });
        }
        design.column_mut(j).scale_mut(1.0 / nrm);
    }
    let rhs = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let svd = design.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    if rank < basis.len() {
        return Err(Error::RankDeficient { rank, needed: basis.len() });
    }
    let qr = design.clone().qr();
    let qtb = qr.q().transpose() * &rhs;
    let sol = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { rank, needed: basis.len() })?;
    let coefficients: Vec<f64> = sol.iter().zip(&norms).map(|(c, n)| c / n).collect();
    let resid = &design * &sol - &rhs;
    let residual_rms = (resid.norm_squared() / samples.len() as f64).sqrt();
    let data_rms = (rhs.norm_squared() / samples.len() as f64).sqrt();
    let mut polynomial = APolynomial::zero(dimension);
    for (b, c) in basis.iter().zip(&coefficients) {
        polynomial = polynomial.add(&b.scaled(*c))?;
    }
    Ok(FitResult { polynomial, coefficients, residual_rms, data_rms, condition_number: smax / smin })
}

/// [`fit_a_harmonic`] on the basis returned by [`a_harmonic_basis`].
pub fn fit_a_harmonic_degree(samples: &[(Vec<f64>, f64)], dimension: usize, a: f64, max_degree: usize) -> Result<FitResult> {
    let basis = a_harmonic_basis(dimension, a, max_degree)?;
    fit_a_harmonic(samples, &basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use proptest::prelude::*;

    fn mono(alpha: &[u32], k: u32) -> Monomial {
        Monomial::new(alpha.to_vec(), k)
    }

    fn poly(n: usize, terms: &[(&[u32], u32, f64)]) -> APolynomial {
        APolynomial::from_terms(n, terms.iter().map(|(a, k, c)| (mono(a, *k), *c))).unwrap()
    }

    #[test]
    fn reduced_operator_examples() {
        let a = 0.3;
        let x1sq = poly(1, &[(&[2], 0, 1.0)]);
        assert_eq!(reduced_la(&x1sq, a).unwrap(), APolynomial::constant(1, 2.0));
        let zsq = poly(1, &[(&[0], 2, 1.0)]);
        assert_eq!(reduced_la(&zsq, a).unwrap(), APolynomial::constant(1, 2.0 * (1.0 + a)));
        let h = poly(1, &[(&[2], 0, 1.0), (&[0], 2, -1.0 / (1.0 + a))]);
        assert!(reduced_la(&h, a).unwrap().is_zero());
    }

    #[test]
    fn odd_z_exponent_is_rejected() {
        let p = poly(1, &[(&[0], 3, 1.0)]);
        assert!(matches!(reduced_la(&p, 0.0), Err(Error::SymmetryViolation { exponent: 3 })));
    }

    #[test]
    fn harmonicity_examples() {
        for a in [-0.5, 0.0, 0.5] {
            assert!(is_a_harmonic(&APolynomial::constant(3, 1.0), a).unwrap());
            assert!(!is_a_harmonic(&poly(3, &[(&[0, 0, 0], 2, 1.0)]), a).unwrap());
            let n = 3.0;
            let p = poly(
                3,
                &[(&[2, 0, 0], 0, 1.0), (&[0, 2, 0], 0, 1.0), (&[0, 0, 2], 0, 1.0), (&[0, 0, 0], 2, -n / (1.0 + a))],
            );
            assert!(is_a_harmonic(&p, a).unwrap());
        }
    }

    #[test]
    fn basis_degree_zero_and_two() {
        let b = a_harmonic_basis(1, 0.4, 0).unwrap();
        assert_eq!(b, vec![APolynomial::constant(1, 1.0)]);
        let a = 0.4;
        let b = a_harmonic_basis(1, a, 2).unwrap();
        assert_eq!(b.len(), 3);
        let expected = poly(1, &[(&[2], 0, 1.0), (&[0], 2, -1.0 / (1.0 + a))]);
        let found = b.iter().find(|p| p.coeff(&mono(&[2], 0)) == 1.0).unwrap();
        assert_relative_eq!(found.coeff(&mono(&[0], 2)), expected.coeff(&mono(&[0], 2)), epsilon = 1e-14);
        assert!(b.contains(&poly(1, &[(&[1], 0, 1.0)])));
        assert!(b.contains(&APolynomial::constant(1, 1.0)));
    }

    #[test]
    fn basis_too_high_degree() {
        assert!(matches!(a_harmonic_basis(2, 0.0, 5), Err(Error::UnsupportedDegree(5))));
    }

    #[test]
    fn quadratic_member_examples() {
        let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let p = quadratic_member(3, 0.0, &eye, -1.0, true).unwrap();
        assert_eq!(p.coeff(&mono(&[0, 0, 0], 2)), -3.0);
        assert_eq!(p.coeff(&mono(&[0, 0, 0], 0)), -1.0);
        assert_eq!(p.coeff(&mono(&[2, 0, 0], 0)), 1.0);
        let p = quadratic_member(3, 0.5, &eye, -1.0, true).unwrap();
        assert_eq!(p.coeff(&mono(&[0, 0, 0], 2)), -2.0);
        let p = quadratic_member(3, 0.5, &eye, 1.0, true).unwrap();
        assert!(is_in_p0prime(&p, 0.5).is_member());
        assert!(p.thin_trace().terms().values().all(|&c| c > 0.0));
    }

    #[test]
    fn quadratic_member_matrix_errors() {
        let bad = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        assert!(quadratic_member(2, 0.0, &bad, -1.0, false).is_err());
        let indefinite = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        assert!(quadratic_member(2, 0.0, &indefinite, -1.0, true).is_err());
        assert!(quadratic_member(2, 0.0, &indefinite, -1.0, false).is_ok());
    }

    #[test]
    fn membership_examples() {
        for a in [-0.5, 0.0, 0.5] {
            let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
            let p = quadratic_member(3, a, &eye, -1.0, true).unwrap();
            let r = is_in_p0prime(&p, a);
            assert!(r.is_member(), "{r:?}");
            assert_relative_eq!(r.sphere_minimum.unwrap(), 1.0, epsilon = 1e-9);
        }
        // -x1^2 + x2^2 + x3^2 - (1/(1+a)) z^2
        let a = 0.0;
        let p = poly(3, &[(&[2, 0, 0], 0, -1.0), (&[0, 2, 0], 0, 1.0), (&[0, 0, 2], 0, 1.0), (&[0, 0, 0], 2, -1.0)]);
        let r = is_in_p0prime(&p, a);
        assert!(r.is_a_harmonic);
        assert_eq!(r.eventual_positivity, Positivity::CertifiedNot);
        let dir = r.witness_direction.unwrap();
        assert!(dir[0].abs() > 0.999, "{dir:?}");
        let r = is_in_p0prime(&poly(3, &[(&[0, 0, 0], 2, 1.0)]), a);
        assert!(!r.is_a_harmonic);
    }

    #[test]
    fn degenerate_leading_form_is_inconclusive() {
        // x1^2 on R^2: leading form vanishes along e_2
        let p = poly(2, &[(&[2, 0], 0, 1.0), (&[0, 0], 2, -1.0), (&[0, 0], 0, 1.0)]);
        let r = is_in_p0prime(&p, 0.0);
        assert_eq!(r.eventual_positivity, Positivity::Inconclusive);
        assert!(!r.is_member());
        // odd leading degree
        let p = poly(1, &[(&[3], 0, 1.0), (&[1], 2, -3.0)]);
        assert_eq!(is_in_p0prime(&p, 0.0).eventual_positivity, Positivity::CertifiedNot);
        // odd z power
        let p = poly(1, &[(&[2], 0, 1.0), (&[0], 1, 1.0)]);
        assert!(!is_in_p0prime(&p, 0.0).is_symmetric);
    }

    #[test]
    fn evaluation_examples() {
        let p = poly(3, &[(&[2, 0, 0], 0, 1.0), (&[0, 2, 0], 0, 1.0), (&[0, 0, 2], 0, 1.0), (&[0, 0, 0], 0, -1.0), (&[0, 0, 0], 2, -3.0)]);
        assert_eq!(p.evaluate(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(p.evaluate(&[0.0, 0.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(p.evaluate(&[0.0, 0.0, 0.0, 1.0]).unwrap(), -4.0);
        assert_eq!(p.evaluate_thin(&[0.0, 2.0, 0.0]).unwrap(), 3.0);
        assert!(p.evaluate(&[0.0, 0.0]).is_err());
        assert!(p.evaluate_thin(&[0.0]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let p = poly(2, &[(&[2, 0], 0, 1.5), (&[0, 0], 2, -3.0)]);
        let doc = PolynomialDoc::from_polynomial(&p, 0.25);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains("\"N\":2"));
        let back: PolynomialDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_polynomial().unwrap(), p);
        assert_eq!(back.a, 0.25);
    }

    fn annulus_samples(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let d = random_unit(&mut rng, n + 1);
                let r: f64 = rng.gen_range(2.0..3.0);
                d.into_iter().map(|x| x * r).collect()
            })
            .collect()
    }

    #[test]
    fn fit_recovers_exact_member() {
        let a = 0.5;
        let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let p = quadratic_member(3, a, &eye, -1.0, true).unwrap();
        let samples: Vec<_> = annulus_samples(3, 400, 1)
            .into_iter()
            .map(|x| {
                let v = p.evaluate(&x).unwrap();
                (x, v)
            })
            .collect();
        let fit = fit_a_harmonic_degree(&samples, 3, a, 4).unwrap();
        assert!(fit.residual_rms < 1e-10);
        let diff = fit.polynomial.sub(&p).unwrap();
        assert!(diff.scale() < 1e-9, "{diff}");
    }

    #[test]
    fn fit_with_noise_is_stable() {
        let a = 0.0;
        let p = poly(2, &[(&[2, 0], 0, 1.0), (&[0, 2], 0, 2.0), (&[0, 0], 2, -3.0), (&[0, 0], 0, -1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<_> = annulus_samples(2, 600, 2)
            .into_iter()
            .map(|x| {
                let v = p.evaluate(&x).unwrap() + 1e-6 * rng.gen_range(-1.0..1.0);
                (x, v)
            })
            .collect();
        let fit = fit_a_harmonic_degree(&samples, 2, a, 2).unwrap();
        let err = fit.polynomial.sub(&p).unwrap().scale();
        assert!(err < 1e-6 * fit.condition_number * 10.0, "err {err}, cond {}", fit.condition_number);
        assert!(err > 0.0);
    }

    #[test]
    fn fit_on_a_line_is_rank_deficient() {
        let samples: Vec<_> = (0..50).map(|i| (vec![i as f64 * 0.1, 0.0, 0.0], 1.0)).collect();
        assert!(matches!(fit_a_harmonic_degree(&samples, 2, 0.0, 2), Err(Error::RankDeficient { .. })));
    }

    fn arb_even_poly(n: usize) -> impl Strategy<Value = APolynomial> {
        let monos = even_monomials(n, 4);
        proptest::collection::vec(-5.0f64..5.0, monos.len()).prop_map(move |cs| {
            APolynomial::from_terms(n, monos.iter().cloned().zip(cs)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn reduced_la_is_linear(p in arb_even_poly(2), q in arb_even_poly(2), s in -3.0f64..3.0, t in -3.0f64..3.0, a in -0.9f64..0.9) {
            let lhs = reduced_la(&p.scaled(s).add(&q.scaled(t)).unwrap(), a).unwrap();
            let rhs = reduced_la(&p, a).unwrap().scaled(s).add(&reduced_la(&q, a).unwrap().scaled(t)).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().scale() < 1e-9);
        }

        #[test]
        fn reduced_la_lowers_homogeneous_degree(p in arb_even_poly(2), a in -0.9f64..0.9, d in 2u32..5) {
            let h = p.homogeneous_part(d);
            let r = reduced_la(&h, a).unwrap();
            prop_assert!(r.is_zero() || r.terms().keys().all(|m| m.degree() == d - 2));
        }

        #[test]
        fn quadratic_members_are_harmonic(d1 in 0.1f64..4.0, d2 in 0.1f64..4.0, off in -0.05f64..0.05, c in -3.0f64..3.0, a in -0.95f64..0.95) {
            let m = vec![vec![d1, off], vec![off, d2]];
            let p = quadratic_member(2, a, &m, c, true).unwrap();
            prop_assert!(is_a_harmonic(&p, a).unwrap());
        }

        #[test]
        fn basis_members_fit_themselves(a in -0.9f64..0.9, j in 0usize..15) {
            let basis = a_harmonic_basis(2, a, 4).unwrap();
            let target = &basis[j % basis.len()];
            let samples: Vec<_> = annulus_samples(2, 200, j as u64)
                .into_iter()
                .map(|x| { let v = target.evaluate(&x).unwrap(); (x, v) })
                .collect();
            let fit = fit_a_harmonic(&samples, &basis).unwrap();
            prop_assert!(fit.residual_rms < 1e-10 * fit.data_rms, "{} vs {} cond {}", fit.residual_rms, fit.data_rms, fit.condition_number);
        }
    }

    #[test]
    fn z_coefficient_stays_finite_near_a_one() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = quadratic_member(2, 1.0 - 1e-12, &eye, 0.0, true).unwrap();
        assert_relative_eq!(p.coeff(&mono(&[0, 0], 2)), -1.0, epsilon = 1e-9);
    }
}
