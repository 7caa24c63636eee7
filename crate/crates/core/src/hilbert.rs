//! Discretized Hilbert-space arithmetic.
//!
//! Elements of `L²(I)` are stored as values on a [`Grid`] whose quadrature
//! weights define the inner product `⟨f, g⟩ = Σ_j w_j f_j g_j`. Euclidean
//! spaces `ℝ^d` use a counting grid with unit weights, so the same code
//! covers both cases.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_DROP_TOL: f64 = 1e-10;

/// Quadrature rule used to build uniform grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Quadrature {
    /// `n` cell midpoints with equal weights `(b - a) / n`.
    #[default]
    Riemann,
    /// `n` equally spaced points including both endpoints, trapezoid weights.
    Trapezoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
    domain: (f64, f64),
}

impl Grid {
    /// Builds a grid from explicit abscissae and quadrature weights. The
    /// domain is taken to be `[points[0], points[n-1]]`.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid has no points".into()));
        }
        let domain = (points[0], points[points.len() - 1]);
        Self::with_domain(points, weights, domain)
    }

    pub fn with_domain(points: Vec<f64>, weights: Vec<f64>, domain: (f64, f64)) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid has no points".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidGrid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().chain(weights.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite point or weight".into()));
        }
        if let Some(j) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "points must be strictly increasing (index {} -> {})",
                j,
                j + 1
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidGrid("negative quadrature weight".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidGrid("quadrature weights sum to zero".into()));
        }
        if !(domain.0 <= points[0] && domain.1 >= points[points.len() - 1] && domain.0 < domain.1)
            && points.len() > 1
        {
            return Err(Error::InvalidGrid(
                "domain does not contain the points".into(),
            ));
        }
        Ok(Self {
            points,
            weights,
            domain,
        })
    }

    /// Uniform grid on `[a, b]` with `n` points using the Riemann (midpoint) rule.
    pub fn uniform(n: usize, a: f64, b: f64) -> Result<Self> {
        Self::uniform_with(n, a, b, Quadrature::Riemann)
    }

    pub fn uniform_with(n: usize, a: f64, b: f64, rule: Quadrature) -> Result<Self> {
        if n == 0 || !(b > a) {
            return Err(Error::InvalidGrid(format!(
                "bad uniform grid n={n} on [{a}, {b}]"
            )));
        }
        let len = b - a;
        match rule {
            Quadrature::Riemann => {
                let h = len / n as f64;
                let points = (0..n).map(|j| a + (j as f64 + 0.5) * h).collect();
                Self::with_domain(points, vec![h; n], (a, b))
            }
            Quadrature::Trapezoid => {
                if n < 2 {
                    return Err(Error::InvalidGrid("trapezoid rule needs n >= 2".into()));
                }
                let h = len / (n - 1) as f64;
                let points = (0..n).map(|j| a + j as f64 * h).collect();
                let mut weights = vec![h; n];
                weights[0] = h / 2.0;
                weights[n - 1] = h / 2.0;
                Self::with_domain(points, weights, (a, b))
            }
        }
    }

    /// `{1, ..., d}` with unit weights: the Euclidean inner product on `ℝ^d`.
    pub fn counting(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidGrid("dimension must be positive".into()));
        }
        let points = (1..=d).map(|j| j as f64).collect();
        Self::with_domain(points, vec![1.0; d], (1.0, d.max(2) as f64))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// Weighted inner product of two raw value slices on this grid.
    #[inline]
    pub fn dot(&self, f: &[f64], g: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.len());
        debug_assert_eq!(g.len(), self.len());
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    #[inline]
    pub fn norm_sq(&self, f: &[f64]) -> f64 {
        self.dot(f, f)
    }

    /// Same grid check used by every binary operation.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || **self == **other
    }
}

/// A point of the discretized Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct HilbertElement {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl HilbertElement {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "element has {} values, grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at grid index {j}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Samples `f` at the grid points.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_grid(&self, other: &Self) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::Dimension("elements live on different grids".into()))
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            values,
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.grid.len());
        Self {
            grid: self.grid.clone(),
            values,
        }
    }
}

pub fn inner(f: &HilbertElement, g: &HilbertElement) -> Result<f64> {
    f.check_grid(g)?;
    Ok(f.grid.dot(&f.values, &g.values))
}

pub fn norm(f: &HilbertElement) -> f64 {
    f.grid.norm_sq(&f.values).max(0.0).sqrt()
}

/// `‖f − g‖`.
pub fn distance(f: &HilbertElement, g: &HilbertElement) -> Result<f64> {
    Ok(norm(&f.sub(g)?))
}

/// Pointwise `Σ_i coeffs[i] · elems[i]`.
pub fn lincomb<E: std::borrow::Borrow<HilbertElement>>(
    coeffs: &[f64],
    elems: &[E],
) -> Result<HilbertElement> {
    if coeffs.len() != elems.len() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} elements",
            coeffs.len(),
            elems.len()
        )));
    }
    let first = elems
        .first()
        .ok_or_else(|| Error::Dimension("empty linear combination".into()))?
        .borrow();
    let mut values = vec![0.0; first.len()];
    for (c, e) in coeffs.iter().zip(elems) {
        let e = e.borrow();
        first.check_grid(e)?;
        for (acc, v) in values.iter_mut().zip(&e.values) {
            *acc += c * v;
        }
    }
    Ok(first.with_values(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    BsplineCubic,
    Fourier,
    Standard,
}

/// `K` functions orthonormal under the grid's inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    kind: BasisKind,
    grid: Arc<Grid>,
    rows: Vec<Vec<f64>>,
}

impl BasisSystem {
    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn element(&self, k: usize) -> HilbertElement {
        HilbertElement {
            grid: self.grid.clone(),
            values: self.rows[k].clone(),
        }
    }

    /// Coefficients of raw grid values, without grid checks.
    pub(crate) fn project_values(&self, values: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| self.grid.dot(row, values))
            .collect()
    }

    /// `Σ_k c_k φ_k`.
    pub fn reconstruct(&self, coefs: &[f64]) -> Result<HilbertElement> {
        if coefs.len() != self.k() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a basis of size {}",
                coefs.len(),
                self.k()
            )));
        }
        let mut values = vec![0.0; self.grid.len()];
        for (c, row) in coefs.iter().zip(&self.rows) {
            for (v, r) in values.iter_mut().zip(row) {
                *v += c * r;
            }
        }
        Ok(HilbertElement {
            grid: self.grid.clone(),
            values,
        })
    }

    /// Gram matrix `⟨φ_j, φ_k⟩`, row-major.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|a| self.rows.iter().map(|b| self.grid.dot(a, b)).collect())
            .collect()
    }
}

pub fn build_basis(kind: BasisKind, k: usize, grid: &Arc<Grid>) -> Result<BasisSystem> {
    let n = grid.len();
    if k == 0 {
        return Err(Error::Orthonormalization("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Orthonormalization(format!(
            "K={k} exceeds the grid size {n}"
        )));
    }
    let raw: Vec<Vec<f64>> = match kind {
        BasisKind::Standard => (0..k)
            .map(|j| {
                let mut row = vec![0.0; n];
                row[j] = 1.0;
                row
            })
            .collect(),
        BasisKind::Fourier => {
            let (a, b) = grid.domain();
            let len = b - a;
            (0..k)
                .map(|j| {
                    grid.points()
                        .iter()
                        .map(|&x| {
                            if j == 0 {
                                1.0
                            } else {
                                2f64.sqrt()
                                    * (j as f64 * std::f64::consts::PI * (x - a) / len).cos()
                            }
                        })
                        .collect()
                })
                .collect()
        }
        BasisKind::BsplineCubic => bspline_design(grid, k),
    };
    let rows = orthonormalize(grid, raw)?;
    Ok(BasisSystem {
        kind,
        grid: grid.clone(),
        rows,
    })
}

/// Coefficients `r_k = ⟨φ_k, f⟩`.
pub fn coefficients(f: &HilbertElement, basis: &BasisSystem) -> Result<Vec<f64>> {
    if !f.grid.same_as(&basis.grid) {
        return Err(Error::Dimension(
            "element and basis live on different grids".into(),
        ));
    }
    Ok(basis.project_values(&f.values))
}

/// Clamped B-spline basis of degree `min(3, k-1)` with `k` functions and
/// uniformly spaced interior knots over the grid's domain.
fn bspline_design(grid: &Grid, k: usize) -> Vec<Vec<f64>> {
    let degree = 3.min(k - 1);
    let (a, b) = grid.domain();
    let interior = k - degree - 1;
    let mut knots = Vec::with_capacity(k + degree + 1);
    knots.extend(std::iter::repeat_n(a, degree + 1));
    for j in 1..=interior {
        knots.push(a + (b - a) * j as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(b, degree + 1));

    let mut rows = vec![vec![0.0; grid.len()]; k];
    for (col, &x) in grid.points().iter().enumerate() {
        let vals = bspline_eval(&knots, degree, k, x);
        for (row, v) in rows.iter_mut().zip(vals) {
            row[col] = v;
        }
    }
    rows
}

/// Cox–de Boor evaluation of all `k` basis functions at `x`.
fn bspline_eval(knots: &[f64], degree: usize, k: usize, x: f64) -> Vec<f64> {
    let last = knots[knots.len() - 1];
    // Degree-0 indicators; the right endpoint belongs to the last nonempty span.
    let m = knots.len() - 1;
    let mut basis: Vec<f64> = (0..m)
        .map(|i| {
            let (lo, hi) = (knots[i], knots[i + 1]);
            if (lo <= x && x < hi) || (x == last && hi == last && lo < hi) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for p in 1..=degree {
        let next: Vec<f64> = (0..m - p)
            .map(|i| {
                let mut v = 0.0;
                let d1 = knots[i + p] - knots[i];
                if d1 > 0.0 {
                    v += (x - knots[i]) / d1 * basis[i];
                }
                let d2 = knots[i + p + 1] - knots[i + 1];
                if d2 > 0.0 {
                    v += (knots[i + p + 1] - x) / d2 * basis[i + 1];
                }
                v
            })
            .collect();
        basis = next;
    }
    basis.truncate(k);
    basis
}

/// Modified Gram–Schmidt with one reorthogonalization pass, under the grid's
/// weighted inner product.
fn orthonormalize(grid: &Grid, raw: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
    for (j, mut v) in raw.into_iter().enumerate() {
        let original = grid.norm_sq(&v).sqrt();
        if original == 0.0 {
            return Err(Error::Orthonormalization(format!(
                "basis function {j} vanishes on the grid"
            )));
        }
        for _ in 0..2 {
            for q in &out {
                let c = grid.dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let nrm = grid.norm_sq(&v).sqrt();
        if nrm <= ORTHO_DROP_TOL * original {
            return Err(Error::Orthonormalization(format!(
                "basis function {j} is linearly dependent on the previous ones over this grid"
            )));
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        out.push(v);
    }
    Ok(out)
}
