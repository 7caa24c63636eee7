//! Metric-space adapters.
//!
//! Each adapter knows how to embed objects of one metric space into the
//! discretized Hilbert space, map image points back, and project arbitrary
//! Hilbert elements onto the (closed, convex) image.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{lincomb, norm, Grid, HilbertElement};

/// Smallest eigenvalue accepted before taking a matrix logarithm.
pub const LOG_EIGEN_FLOOR: f64 = 1e-12;
/// Tolerance for membership checks on image points, relative to `max(1, |h|∞)`.
pub const IMAGE_TOL: f64 = 1e-8;
const DYKSTRA_MAX_ITER: usize = 10_000;
const DYKSTRA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricObject {
    Function(Vec<f64>),
    /// Quantile function values on the adapter's quantile grid.
    Distribution(Vec<f64>),
    SpdMatrix(DMatrix<f64>),
    GraphLaplacian(DMatrix<f64>),
    Composition(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpdMetric {
    Frobenius,
    Power(f64),
    LogEuclidean,
}

/// How off-image quantile vectors are mapped back to monotone ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MonotoneFix {
    /// Sort the values (increasing rearrangement).
    #[default]
    Rearrangement,
    /// Weighted isotonic regression: the exact nearest monotone vector.
    Isotonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    L2,
    Wasserstein { fix: MonotoneFix },
    Spd { m: usize, metric: SpdMetric },
    Laplacian { m: usize, max_weight: f64 },
    Composition { d: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceAdapter {
    kind: SpaceKind,
    grid: Arc<Grid>,
}

impl SpaceAdapter {
    /// Functional data on an arbitrary grid.
    pub fn l2(grid: Arc<Grid>) -> Self {
        Self {
            kind: SpaceKind::L2,
            grid,
        }
    }

    /// One-dimensional distributions represented by quantiles on `n`
    /// midpoints of `(0, 1)`.
    pub fn wasserstein(n: usize) -> Result<Self> {
        Ok(Self::wasserstein_on(Arc::new(Grid::uniform(n, 0.0, 1.0)?)))
    }

    pub fn wasserstein_on(grid: Arc<Grid>) -> Self {
        Self {
            kind: SpaceKind::Wasserstein {
                fix: MonotoneFix::Rearrangement,
            },
            grid,
        }
    }

    pub fn with_monotone_fix(mut self, fix: MonotoneFix) -> Self {
        if let SpaceKind::Wasserstein { fix: f } = &mut self.kind {
            *f = fix;
        }
        self
    }

    pub fn spd(m: usize, metric: SpdMetric) -> Result<Self> {
        if let SpdMetric::Power(p) = metric {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "power metric needs p > 0, got {p}"
                )));
            }
        }
        Ok(Self {
            kind: SpaceKind::Spd { m, metric },
            grid: Arc::new(Grid::counting(m * m)?),
        })
    }

    pub fn laplacian(m: usize, max_weight: f64) -> Result<Self> {
        if !(max_weight > 0.0 && max_weight.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "edge weight cap must be positive, got {max_weight}"
            )));
        }
        Ok(Self {
            kind: SpaceKind::Laplacian { m, max_weight },
            grid: Arc::new(Grid::counting(m * m)?),
        })
    }

    pub fn composition(d: usize) -> Result<Self> {
        Ok(Self {
            kind: SpaceKind::Composition { d },
            grid: Arc::new(Grid::counting(d)?),
        })
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    fn element(&self, values: Vec<f64>) -> Result<HilbertElement> {
        HilbertElement::new(self.grid.clone(), values)
    }

    fn check_element(&self, h: &HilbertElement) -> Result<()> {
        if h.grid().same_as(&self.grid) {
            Ok(())
        } else {
            Err(Error::Dimension(
                "element does not live on the adapter's grid".into(),
            ))
        }
    }

    /// Checks that `obj` is a valid point of this adapter's space.
    pub fn validate(&self, obj: &MetricObject) -> Result<()> {
        let n = self.grid.len();
        match (self.kind, obj) {
            (SpaceKind::L2, MetricObject::Function(v)) => check_len(v.len(), n),
            (SpaceKind::Wasserstein { .. }, MetricObject::Distribution(q)) => {
                check_len(q.len(), n)?;
                let tol = 1e-12 * scale(q);
                if let Some(j) = q.windows(2).position(|w| w[1] < w[0] - tol) {
                    return Err(Error::Domain(format!(
                        "quantile values decrease between indices {} and {}",
                        j,
                        j + 1
                    )));
                }
                Ok(())
            }
            (SpaceKind::Spd { m, metric }, MetricObject::SpdMatrix(a)) => {
                check_square(a, m)?;
                check_symmetric(a, 1e-10)?;
                let eig = SymmetricEigen::new(symmetrize(a)).eigenvalues;
                let min = eig.min();
                match metric {
                    SpdMetric::LogEuclidean if min <= LOG_EIGEN_FLOOR => Err(Error::Domain(format!(
                        "log-Euclidean metric needs a positive definite matrix (min eigenvalue {min:.3e})"
                    ))),
                    _ if min < -1e-10 * scale(a.as_slice()) => Err(Error::Domain(format!(
                        "matrix is not positive semidefinite (min eigenvalue {min:.3e})"
                    ))),
                    _ => Ok(()),
                }
            }
            (SpaceKind::Laplacian { m, max_weight }, MetricObject::GraphLaplacian(l)) => {
                check_square(l, m)?;
                laplacian_violation(l.as_slice(), m, max_weight, 1e-10 * scale(l.as_slice()))
                    .map_or(Ok(()), |msg| Err(Error::Domain(msg)))
            }
            (SpaceKind::Composition { d }, MetricObject::Composition(x)) => {
                check_len(x.len(), d)?;
                if x.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Domain(
                        "composition parts must be strictly positive".into(),
                    ));
                }
                let s: f64 = x.iter().sum();
                if (s - 1.0).abs() > 1e-10 {
                    return Err(Error::Domain(format!("composition sums to {s}, not 1")));
                }
                Ok(())
            }
            _ => Err(Error::InvalidInput(
                "object kind does not match the adapter's space".into(),
            )),
        }
    }

    /// The isometric embedding into the Hilbert space.
    pub fn embed(&self, obj: &MetricObject) -> Result<HilbertElement> {
        self.validate(obj)?;
        let values = match (self.kind, obj) {
            (SpaceKind::L2, MetricObject::Function(v)) => v.clone(),
            (SpaceKind::Wasserstein { .. }, MetricObject::Distribution(q)) => q.clone(),
            (SpaceKind::Spd { metric, .. }, MetricObject::SpdMatrix(a)) => {
                let a = symmetrize(a);
                let mapped = match metric {
                    SpdMetric::Frobenius => a,
                    SpdMetric::Power(p) => spectral_map(&a, |l| l.max(0.0).powf(p)),
                    SpdMetric::LogEuclidean => spectral_map(&a, f64::ln),
                };
                flatten(&mapped)
            }
            (SpaceKind::Laplacian { .. }, MetricObject::GraphLaplacian(l)) => flatten(l),
            (SpaceKind::Composition { .. }, MetricObject::Composition(x)) => {
                let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
                let mean = logs.iter().sum::<f64>() / logs.len() as f64;
                logs.into_iter().map(|l| l - mean).collect()
            }
            _ => unreachable!("validate rejects mismatched kinds"),
        };
        self.element(values)
    }

    /// Inverse of [`embed`](Self::embed). `h` must lie in the image; call
    /// [`project`](Self::project) first otherwise.
    pub fn inverse(&self, h: &HilbertElement) -> Result<MetricObject> {
        self.check_element(h)?;
        let v = h.values();
        let tol = IMAGE_TOL * scale(v);
        let outside = |what: &str| {
            Err(Error::Domain(format!(
                "element lies outside the image ({what}); project it first"
            )))
        };
        match self.kind {
            SpaceKind::L2 => Ok(MetricObject::Function(v.to_vec())),
            SpaceKind::Wasserstein { .. } => {
                if v.windows(2).any(|w| w[1] < w[0] - tol) {
                    return outside("quantiles are not nondecreasing");
                }
                Ok(MetricObject::Distribution(v.to_vec()))
            }
            SpaceKind::Spd { m, metric } => {
                let b = unflatten(v, m);
                if !is_symmetric(&b, tol) {
                    return outside("matrix is not symmetric");
                }
                let b = symmetrize(&b);
                let a = match metric {
                    SpdMetric::LogEuclidean => spectral_map(&b, f64::exp),
                    SpdMetric::Frobenius | SpdMetric::Power(_) => {
                        let min = SymmetricEigen::new(b.clone()).eigenvalues.min();
                        if min < -tol {
                            return outside("matrix has a negative eigenvalue");
                        }
                        match metric {
                            SpdMetric::Power(p) => spectral_map(&b, |l| l.max(0.0).powf(1.0 / p)),
                            _ => b,
                        }
                    }
                };
                Ok(MetricObject::SpdMatrix(a))
            }
            SpaceKind::Laplacian { m, max_weight } => {
                if let Some(msg) = laplacian_violation(v, m, max_weight, tol) {
                    return outside(&msg);
                }
                Ok(MetricObject::GraphLaplacian(unflatten(v, m)))
            }
            SpaceKind::Composition { .. } => {
                let s: f64 = v.iter().sum();
                if s.abs() > tol * v.len() as f64 {
                    return outside("clr coordinates do not sum to zero");
                }
                let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                Ok(MetricObject::Composition(
                    e.into_iter().map(|x| x / tot).collect(),
                ))
            }
        }
    }

    /// Nearest point of the image (for distributions, see [`MonotoneFix`]).
    pub fn project(&self, h: &HilbertElement) -> Result<HilbertElement> {
        self.check_element(h)?;
        let v = h.values();
        let out = match self.kind {
            SpaceKind::L2 => v.to_vec(),
            SpaceKind::Wasserstein { fix } => match fix {
                MonotoneFix::Rearrangement => {
                    let mut s = v.to_vec();
                    s.sort_by(f64::total_cmp);
                    s
                }
                MonotoneFix::Isotonic => isotonic(v, self.grid.weights()),
            },
            SpaceKind::Spd { m, metric } => {
                let b = symmetrize(&unflatten(v, m));
                match metric {
                    SpdMetric::LogEuclidean => flatten(&b),
                    SpdMetric::Frobenius | SpdMetric::Power(_) => {
                        flatten(&spectral_map(&b, |l| l.max(0.0)))
                    }
                }
            }
            SpaceKind::Laplacian { m, max_weight } => dykstra_laplacian(v, m, max_weight)?,
            SpaceKind::Composition { .. } => {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| x - mean).collect()
            }
        };
        Ok(h.with_values(out))
    }

    /// `d(a, b) = ‖Ψ(a) − Ψ(b)‖`.
    pub fn distance(&self, a: &MetricObject, b: &MetricObject) -> Result<f64> {
        Ok(norm(&self.embed(a)?.sub(&self.embed(b)?)?))
    }

    /// Point at fraction `s` along the unique geodesic from `a` to `b`.
    pub fn geodesic(&self, a: &MetricObject, b: &MetricObject, s: f64) -> Result<MetricObject> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidInput(format!(
                "geodesic parameter {s} outside [0, 1]"
            )));
        }
        let ha = self.embed(a)?;
        let hb = self.embed(b)?;
        self.geodesic_embedded(&ha, &hb, s)
    }

    /// Geodesic between two image points given in embedded form.
    pub fn geodesic_embedded(
        &self,
        ha: &HilbertElement,
        hb: &HilbertElement,
        s: f64,
    ) -> Result<MetricObject> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidInput(format!(
                "geodesic parameter {s} outside [0, 1]"
            )));
        }
        self.inverse(&lincomb(&[1.0 - s, s], &[ha, hb])?)
    }
}

fn scale(v: &[f64]) -> f64 {
    v.iter().fold(1.0f64, |m, x| m.max(x.abs()))
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "expected {want} values, got {got}"
        )))
    }
}

fn check_square(a: &DMatrix<f64>, m: usize) -> Result<()> {
    if a.nrows() == m && a.ncols() == m {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "expected a {m}x{m} matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )))
    }
}

fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    let m = a.nrows();
    (0..m).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

fn check_symmetric(a: &DMatrix<f64>, rel: f64) -> Result<()> {
    if is_symmetric(a, rel * scale(a.as_slice())) {
        Ok(())
    } else {
        Err(Error::Domain("matrix is not symmetric".into()))
    }
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `U f(Λ) Uᵀ` for a symmetric matrix.
pub(crate) fn spectral_map(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    let out = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    symmetrize(&out)
}

/// Row-major flattening.
pub fn flatten(a: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = a.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(a[(i, j)]);
        }
    }
    v
}

pub fn unflatten(v: &[f64], m: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, m, v)
}

fn laplacian_violation(v: &[f64], m: usize, w: f64, tol: f64) -> Option<String> {
    for i in 0..m {
        let row = &v[i * m..(i + 1) * m];
        let s: f64 = row.iter().sum();
        if s.abs() > tol * m as f64 {
            return Some(format!("row {i} sums to {s:.3e}"));
        }
        for j in 0..m {
            if (v[i * m + j] - v[j * m + i]).abs() > tol {
                return Some(format!("entries ({i},{j}) and ({j},{i}) differ"));
            }
            if i != j && (v[i * m + j] > tol || v[i * m + j] < -w - tol) {
                return Some(format!(
                    "off-diagonal ({i},{j}) = {} outside [-{w}, 0]",
                    v[i * m + j]
                ));
            }
        }
    }
    None
}

/// Projection onto symmetric matrices with zero row sums.
fn project_sym_zero_rows(x: &[f64], m: usize) -> Vec<f64> {
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            s[i * m + j] = 0.5 * (x[i * m + j] + x[j * m + i]);
        }
    }
    let u: Vec<f64> = (0..m).map(|i| s[i * m..(i + 1) * m].iter().sum()).collect();
    let total: f64 = u.iter().sum();
    let mf = m as f64;
    let shift = total / (2.0 * mf);
    let a: Vec<f64> = u.iter().map(|ui| (ui - shift) / mf).collect();
    for i in 0..m {
        for j in 0..m {
            s[i * m + j] -= a[i] + a[j];
        }
    }
    s
}

fn project_offdiag_box(x: &[f64], m: usize, w: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                out[i * m + j] = out[i * m + j].clamp(-w, 0.0);
            }
        }
    }
    out
}

/// Dykstra's alternating projections onto
/// `{symmetric, zero row sums} ∩ {off-diagonals in [−W, 0]}`.
fn dykstra_laplacian(h: &[f64], m: usize, w: f64) -> Result<Vec<f64>> {
    let n = h.len();
    let tol = DYKSTRA_TOL * scale(h);
    let mut x = h.to_vec();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut last_change = f64::INFINITY;
    for _ in 0..DYKSTRA_MAX_ITER {
        let xp: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
        let y = project_sym_zero_rows(&xp, m);
        for k in 0..n {
            p[k] = xp[k] - y[k];
        }
        let yq: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
        let xn = project_offdiag_box(&yq, m, w);
        for k in 0..n {
            q[k] = yq[k] - xn[k];
        }
        let change = xn
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let gap = xn
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        x = xn;
        last_change = change.max(gap);
        if last_change <= tol {
            return Ok(project_sym_zero_rows(&x, m));
        }
    }
    Err(Error::ProjectionConvergence {
        iterations: DYKSTRA_MAX_ITER,
        residual: last_change,
    })
}

/// Weighted pool-adjacent-violators: the `L²(w)` projection onto
/// nondecreasing vectors.
pub(crate) fn isotonic(v: &[f64], w: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(v.len());
    for (&y, &wt) in v.iter().zip(w) {
        let wt = wt.max(f64::MIN_POSITIVE);
        blocks.push((y, wt, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}
