//! Weight fitting: the simplex-constrained FSC program, the ridge-augmented
//! closed form, covariate-balanced variants, and leave-one-period-out CV.
//!
//! Periods are 0-based throughout: pre-treatment periods are `0..t0`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hilbert::{build_basis, BasisKind, BasisSystem, Grid, HilbertElement};

const QP_TOL: f64 = 1e-9;
const QP_MAX_ITER: usize = 50_000;

/// N units by T periods of embedded outcomes. Unit 0 is the treated unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    outcomes: Vec<Vec<HilbertElement>>,
    t0: usize,
    covariates: Option<DMatrix<f64>>,
}

impl Panel {
    pub fn new(outcomes: Vec<Vec<HilbertElement>>, t0: usize) -> Result<Self> {
        let n = outcomes.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 units, got {n}"
            )));
        }
        let t = outcomes[0].len();
        if t0 < 1 || t0 >= t {
            return Err(Error::InvalidInput(format!(
                "need 1 <= T0 < T, got T0={t0}, T={t}"
            )));
        }
        let grid = outcomes[0][0].grid().clone();
        for (i, row) in outcomes.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Dimension(format!(
                    "unit {i} has {} periods, expected {t}",
                    row.len()
                )));
            }
            if let Some(s) = row.iter().position(|y| !y.grid().same_as(&grid)) {
                return Err(Error::Dimension(format!(
                    "unit {i}, period {s} is not on the panel grid"
                )));
            }
        }
        Ok(Self {
            outcomes,
            t0,
            covariates: None,
        })
    }

    /// Attaches an N x p covariate matrix (row i belongs to unit i).
    pub fn with_covariates(mut self, z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() != self.n_units() || z.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "covariates must be {} x p with p >= 1, got {} x {}",
                self.n_units(),
                z.nrows(),
                z.ncols()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates must be finite".into()));
        }
        self.covariates = Some(z);
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_controls(&self) -> usize {
        self.outcomes.len() - 1
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes[0].len()
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.outcomes[0][0].grid()
    }

    pub fn outcome(&self, unit: usize, period: usize) -> &HilbertElement {
        &self.outcomes[unit][period]
    }

    pub fn unit(&self, unit: usize) -> &[HilbertElement] {
        &self.outcomes[unit]
    }

    pub fn covariates(&self) -> Option<&DMatrix<f64>> {
        self.covariates.as_ref()
    }

    /// A panel made of the listed units (first one treated) and periods,
    /// with the first `t0` listed periods treated as pre-treatment.
    pub fn subpanel(&self, units: &[usize], periods: &[usize], t0: usize) -> Result<Panel> {
        let outcomes = units
            .iter()
            .map(|&i| {
                periods
                    .iter()
                    .map(|&s| self.outcomes[i][s].clone())
                    .collect()
            })
            .collect();
        let mut p = Panel::new(outcomes, t0)?;
        if let Some(z) = &self.covariates {
            p = p.with_covariates(z.select_rows(units))?;
        }
        Ok(p)
    }

    /// Residual `Y_0t - sum_i w_i Y_it` of the treated unit at period `t`.
    pub fn residual(&self, weights: &[f64], t: usize) -> HilbertElement {
        let grid = self.grid().clone();
        let mut v = self.outcomes[0][t].values().to_vec();
        for (w, row) in weights.iter().zip(&self.outcomes[1..]) {
            for (a, b) in v.iter_mut().zip(row[t].values()) {
                *a -= w * b;
            }
        }
        HilbertElement::new(grid, v).expect("residual of finite outcomes is finite")
    }

    /// `sum_{t < t0} |Y_0t - sum_i w_i Y_it|^2`.
    pub fn pre_objective(&self, weights: &[f64]) -> f64 {
        (0..self.t0)
            .map(|t| {
                let r = self.residual(weights, t);
                self.grid().norm_sq(r.values())
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Simplex,
    SumToOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub kind: WeightKind,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn l1(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    pub fn l2(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Basis coefficients of the centered pre-treatment outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBlock {
    /// (N-1) x (K*T0); row i is unit i+1, periods concatenated.
    pub r0: DMatrix<f64>,
    /// Treated unit, length K*T0.
    pub r1: DVector<f64>,
    pub k: usize,
    /// Control mean of each pre-period.
    pub means: Vec<HilbertElement>,
}

impl CoefficientBlock {
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .r0
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }
}

fn control_mean(panel: &Panel, t: usize) -> HilbertElement {
    let n = panel.n_controls() as f64;
    let mut v = vec![0.0; panel.grid().len()];
    for i in 1..panel.n_units() {
        for (a, b) in v.iter_mut().zip(panel.outcome(i, t).values()) {
            *a += b;
        }
    }
    v.iter_mut().for_each(|a| *a /= n);
    panel.outcome(0, t).with_values(v)
}

/// Centers pre-period outcomes by the control mean and expands them in the basis.
pub fn center_and_expand(panel: &Panel, basis: &BasisSystem) -> Result<CoefficientBlock> {
    if !basis.grid().same_as(panel.grid()) {
        return Err(Error::Dimension(
            "basis grid differs from panel grid".into(),
        ));
    }
    let (n, k, t0) = (panel.n_units(), basis.k(), panel.t0());
    let mut r = DMatrix::zeros(n, k * t0);
    let mut means = Vec::with_capacity(t0);
    for s in 0..t0 {
        let mean = control_mean(panel, s);
        for i in 0..n {
            let x: Vec<f64> = panel
                .outcome(i, s)
                .values()
                .iter()
                .zip(mean.values())
                .map(|(a, b)| a - b)
                .collect();
            for (kk, c) in basis.project_values(&x).into_iter().enumerate() {
                r[(i, s * k + kk)] = c;
            }
        }
        means.push(mean);
    }
    Ok(CoefficientBlock {
        r0: r.rows(1, n - 1).into_owned(),
        r1: r.row(0).transpose(),
        k,
        means,
    })
}

/// Exact Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &mut [f64]) {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Minimizes `g'Gg - 2b'g` over the simplex by FISTA with adaptive restart.
pub fn solve_simplex_qp(g: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = b.len();
    if g.nrows() != n || g.ncols() != n || n == 0 {
        return Err(Error::Dimension("QP matrix and vector sizes differ".into()));
    }
    if n == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    // rescale so the stopping rule does not depend on the data's units
    let scale = g.trace() / n as f64;
    let scale = if scale > 0.0 && scale.is_finite() {
        scale
    } else {
        1.0
    };
    let g = g / scale;
    let b = b / scale;
    let lmax = SymmetricEigen::new((&g + g.transpose()) * 0.5)
        .eigenvalues
        .max();
    let lip = (2.0 * lmax).max(1e-12);

    let grad = |x: &DVector<f64>| (&g * x - &b) * 2.0;
    let step = |x: &DVector<f64>, gr: &DVector<f64>| {
        let mut z: Vec<f64> = (x - gr / lip).iter().copied().collect();
        project_simplex(&mut z);
        DVector::from_vec(z)
    };
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut y = x.clone();
    let mut tk = 1.0f64;
    let mut gap = f64::INFINITY;
    for _ in 0..QP_MAX_ITER {
        let gx = grad(&x);
        let pg = (&x - step(&x, &gx)).norm() * lip;
        gap = gx.dot(&x) - gx.min();
        if pg <= QP_TOL {
            return Ok(x);
        }
        let x_new = step(&y, &grad(&y));
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
            tk = 1.0;
            y = x_new.clone();
        } else {
            y = &x_new + (&x_new - &x) * ((tk - 1.0) / t_new);
            tk = t_new;
        }
        x = x_new;
    }
    Err(Error::Solver {
        iterations: QP_MAX_ITER,
        gap: gap * scale,
    })
}

/// `G_ij = sum_{t<t0} <Y_it, Y_jt>` over controls and `b_i = sum <Y_0t, Y_it>`.
fn scm_system(panel: &Panel) -> (DMatrix<f64>, DVector<f64>) {
    let n = panel.n_controls();
    let grid = panel.grid();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for t in 0..panel.t0() {
        for i in 0..n {
            let yi = panel.outcome(i + 1, t).values();
            b[i] += grid.dot(panel.outcome(0, t).values(), yi);
            for j in 0..=i {
                let v = grid.dot(yi, panel.outcome(j + 1, t).values());
                g[(i, j)] += v;
                if i != j {
                    g[(j, i)] += v;
                }
            }
        }
    }
    (g, b)
}

fn simplex_weights(x: DVector<f64>) -> WeightVector {
    WeightVector {
        weights: x.iter().copied().collect(),
        kind: WeightKind::Simplex,
    }
}

/// FSC weights: the simplex point that best matches the treated unit's
/// pre-treatment trajectory.
pub fn fit_scm(panel: &Panel) -> Result<WeightVector> {
    let (g, b) = scm_system(panel);
    Ok(simplex_weights(solve_simplex_qp(&g, &b)?))
}

/// FSC weights with an extra penalty `w |Z_0 - sum_i g_i Z_i|^2`.
pub fn fit_scm_cov(panel: &Panel, w: f64) -> Result<WeightVector> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "covariate weight must be >= 0, got {w}"
        )));
    }
    let z = panel
        .covariates()
        .ok_or_else(|| Error::InvalidInput("panel has no covariates".into()))?;
    let (mut g, mut b) = scm_system(panel);
    let n = panel.n_units();
    let z0 = z.rows(1, n - 1);
    let z1 = z.row(0).transpose();
    g += z0 * z0.transpose() * w;
    b += z0 * z1 * w;
    Ok(simplex_weights(solve_simplex_qp(&g, &b)?))
}

/// Solves `a x = rhs` for symmetric positive definite `a`: Cholesky first,
/// SVD when Cholesky breaks down.
fn solve_spd(a: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition < 1e15) {
        return Err(Error::Numeric {
            reason: "ridge system is numerically singular".into(),
            condition,
        });
    }
    svd.solve(rhs, 0.0).map_err(|e| Error::Numeric {
        reason: e.to_string(),
        condition,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "lambda must be positive and finite, got {lambda}"
        )))
    }
}

/// `r0 (r0'r0 + lambda I)^-1 v`, computed in whichever of the two Gram
/// matrices is smaller.
fn ridge_apply(r0: &DMatrix<f64>, v: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let (n, m) = r0.shape();
    if n <= m {
        let a = r0 * r0.transpose() + DMatrix::identity(n, n) * lambda;
        solve_spd(a, &(r0 * v))
    } else {
        let a = r0.transpose() * r0 + DMatrix::identity(m, m) * lambda;
        Ok(r0 * solve_spd(a, v)?)
    }
}

/// The ridge correction added to given FSC weights.
pub fn ridge_correction(
    block: &CoefficientBlock,
    scm: &WeightVector,
    lambda: f64,
) -> Result<WeightVector> {
    check_lambda(lambda)?;
    let gs = DVector::from_column_slice(scm.as_slice());
    if gs.len() != block.r0.nrows() {
        return Err(Error::Dimension(
            "weight length differs from control count".into(),
        ));
    }
    let resid = &block.r1 - block.r0.transpose() * &gs;
    let gamma = &gs + ridge_apply(&block.r0, &resid, lambda)?;
    Ok(WeightVector {
        weights: gamma.iter().copied().collect(),
        kind: WeightKind::SumToOne,
    })
}

/// Ridge-augmented FSC weights.
pub fn fit_ridge_augmented(
    panel: &Panel,
    basis: &BasisSystem,
    lambda: f64,
) -> Result<WeightVector> {
    check_lambda(lambda)?;
    let scm = fit_scm(panel)?;
    let block = center_and_expand(panel, basis)?;
    ridge_correction(&block, &scm, lambda)
}

/// Direct KKT solve of `min |r1 - r0'g|^2 + lambda |g - g_scm|^2` subject to
/// `sum g = 1`. Kept as an independent route to the closed form.
pub fn penalized_qp_oracle(
    block: &CoefficientBlock,
    scm: &WeightVector,
    lambda: f64,
) -> Result<WeightVector> {
    check_lambda(lambda)?;
    let n = block.r0.nrows();
    let gs = DVector::from_column_slice(scm.as_slice());
    let mut kkt = DMatrix::zeros(n + 1, n + 1);
    let h = (&block.r0 * block.r0.transpose() + DMatrix::identity(n, n) * lambda) * 2.0;
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    for i in 0..n {
        kkt[(i, n)] = 1.0;
        kkt[(n, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(n + 1);
    rhs.rows_mut(0, n)
        .copy_from(&((&block.r0 * &block.r1 + &gs * lambda) * 2.0));
    rhs[n] = 1.0;
    let sol = kkt.lu().solve(&rhs).ok_or_else(|| Error::Numeric {
        reason: "KKT system is singular".into(),
        condition: f64::INFINITY,
    })?;
    Ok(WeightVector {
        weights: sol.rows(0, n).iter().copied().collect(),
        kind: WeightKind::SumToOne,
    })
}

/// Covariates centered by the control mean, with columns that vanish for
/// every unit dropped (they impose no constraint).
pub(crate) fn centered_covariates(panel: &Panel) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let z = panel
        .covariates()
        .ok_or_else(|| Error::InvalidInput("panel has no covariates".into()))?;
    let n = panel.n_units();
    let mean = z.rows(1, n - 1).row_mean();
    let mut zc = z.clone();
    for mut row in zc.row_iter_mut() {
        row -= &mean;
    }
    let scale = z.amax().max(1.0);
    let keep: Vec<usize> = (0..zc.ncols())
        .filter(|&c| zc.column(c).amax() > 1e-14 * scale)
        .collect();
    let zc = zc.select_columns(&keep);
    let z0 = zc.rows(1, n - 1).into_owned();
    let z1 = zc.row(0).transpose();
    // collinearity among the kept control columns
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (c, col) in z0.column_iter().enumerate() {
        let mut v = col.into_owned();
        let orig = v.norm();
        for q in &basis {
            let d = q.dot(&v);
            v -= q * d;
        }
        for q in &basis {
            let d = q.dot(&v);
            v -= q * d;
        }
        if v.norm() <= 1e-10 * orig.max(f64::MIN_POSITIVE) {
            bad.push(keep[c]);
        } else {
            basis.push(&v / v.norm());
        }
    }
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    Ok((z0, z1))
}

/// Ridge-augmented FSC weights that balance the covariates exactly.
pub fn fit_ridge_augmented_cov(
    panel: &Panel,
    basis: &BasisSystem,
    lambda: f64,
) -> Result<WeightVector> {
    check_lambda(lambda)?;
    let (z0, z1) = centered_covariates(panel)?;
    let scm = fit_scm(panel)?;
    let block = center_and_expand(panel, basis)?;
    ridge_correction_cov(&block, &z0, &z1, &scm, lambda)
}

pub(crate) fn ridge_correction_cov(
    block: &CoefficientBlock,
    z0: &DMatrix<f64>,
    z1: &DVector<f64>,
    scm: &WeightVector,
    lambda: f64,
) -> Result<WeightVector> {
    let gs = DVector::from_column_slice(scm.as_slice());
    if z0.ncols() == 0 {
        return ridge_correction(block, scm, lambda);
    }
    let ztz = z0.transpose() * z0;
    let ztz_inv = ztz
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numeric {
            reason: "covariate Gram matrix is not positive definite".into(),
            condition: f64::INFINITY,
        })?;
    // hat = Z0 (Z0'Z0)^-1
    let hat = z0 * &ztz_inv;
    let r0c = &block.r0 - &hat * (z0.transpose() * &block.r0);
    let r1c = &block.r1 - block.r0.transpose() * (&hat * z1);
    let resid = &r1c - r0c.transpose() * &gs;
    let gamma = &gs + ridge_apply(&r0c, &resid, lambda)? + &hat * (z1 - z0.transpose() * &gs);
    Ok(WeightVector {
        weights: gamma.iter().copied().collect(),
        kind: WeightKind::SumToOne,
    })
}

/// KKT solve of the covariate-balanced penalized program; test oracle for
/// [`fit_ridge_augmented_cov`].
pub fn penalized_qp_oracle_cov(
    block: &CoefficientBlock,
    panel: &Panel,
    scm: &WeightVector,
    lambda: f64,
) -> Result<WeightVector> {
    check_lambda(lambda)?;
    let (z0, z1) = centered_covariates(panel)?;
    let (n, p) = (block.r0.nrows(), z0.ncols());
    let gs = DVector::from_column_slice(scm.as_slice());
    let dim = n + 1 + p;
    let mut kkt = DMatrix::zeros(dim, dim);
    let h = (&block.r0 * block.r0.transpose() + DMatrix::identity(n, n) * lambda) * 2.0;
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    for i in 0..n {
        kkt[(i, n)] = 1.0;
        kkt[(n, i)] = 1.0;
    }
    kkt.view_mut((0, n + 1), (n, p)).copy_from(&z0);
    kkt.view_mut((n + 1, 0), (p, n)).copy_from(&z0.transpose());
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n)
        .copy_from(&((&block.r0 * &block.r1 + &gs * lambda) * 2.0));
    rhs[n] = 1.0;
    rhs.rows_mut(n + 1, p).copy_from(&z1);
    let sol = kkt.lu().solve(&rhs).ok_or_else(|| Error::Numeric {
        reason: "KKT system is singular".into(),
        condition: f64::INFINITY,
    })?;
    Ok(WeightVector {
        weights: sol.rows(0, n).iter().copied().collect(),
        kind: WeightKind::SumToOne,
    })
}

/// `|Z_0 - sum_i g_i Z_i|` on the raw covariates.
pub fn covariate_imbalance(panel: &Panel, weights: &[f64]) -> Option<f64> {
    let z = panel.covariates()?;
    let mut d = z.row(0).transpose();
    for (i, w) in weights.iter().enumerate() {
        d -= z.row(i + 1).transpose() * *w;
    }
    Some(d.norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub lambdas: Vec<f64>,
    pub scores: Vec<f64>,
    pub best_lambda: f64,
}

/// 20 log-spaced values over `[1e-4, 1e4] * d_max^2`.
pub fn default_lambda_grid(block: &CoefficientBlock) -> Vec<f64> {
    let dmax = block.singular_values().first().copied().unwrap_or(0.0);
    let s = if dmax > 0.0 { dmax * dmax } else { 1.0 };
    (0..20)
        .map(|j| s * 10f64.powf(-4.0 + 8.0 * j as f64 / 19.0))
        .collect()
}

/// Leave-one-period-out CV over a lambda grid. Ties go to the larger lambda.
pub fn cv_lambda(
    panel: &Panel,
    basis: &BasisSystem,
    grid: &[f64],
    covariates: bool,
    exec: Execution,
) -> Result<CvCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("lambda grid is empty".into()));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    let t0 = panel.t0();
    if t0 < 2 {
        return Err(Error::InvalidInput("cross-validation needs T0 >= 2".into()));
    }
    let units: Vec<usize> = (0..panel.n_units()).collect();
    let folds = exec.try_map(t0, |held| -> Result<Vec<f64>> {
        let fold_err = |lambda: Option<f64>| {
            move |e: Error| Error::CvFold {
                lambda,
                period: held,
                source: Box::new(e),
            }
        };
        let mut periods: Vec<usize> = (0..t0).filter(|&s| s != held).collect();
        periods.push(held);
        let sub = panel
            .subpanel(&units, &periods, t0 - 1)
            .map_err(fold_err(None))?;
        let scm = fit_scm(&sub).map_err(fold_err(None))?;
        let block = center_and_expand(&sub, basis).map_err(fold_err(None))?;
        let zs = if covariates {
            Some(centered_covariates(&sub).map_err(fold_err(None))?)
        } else {
            None
        };
        grid.iter()
            .map(|&lambda| {
                let w = match &zs {
                    Some((z0, z1)) => ridge_correction_cov(&block, z0, z1, &scm, lambda),
                    None => ridge_correction(&block, &scm, lambda),
                }
                .map_err(fold_err(Some(lambda)))?;
                let r = sub.residual(w.as_slice(), t0 - 1);
                Ok(sub.grid().norm_sq(r.values()))
            })
            .collect()
    })?;
    let scores: Vec<f64> = (0..grid.len())
        .map(|j| folds.iter().map(|f| f[j]).sum())
        .collect();
    let mut best = 0;
    for j in 1..grid.len() {
        if scores[j] < scores[best] || (scores[j] == scores[best] && grid[j] > grid[best]) {
            best = j;
        }
    }
    Ok(CvCurve {
        lambdas: grid.to_vec(),
        scores,
        best_lambda: grid[best],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub prefit: f64,
    pub l1_norm: f64,
    pub l2_norm: f64,
    pub covariate_imbalance: Option<f64>,
    pub singular_values: Vec<f64>,
}

pub fn diagnostics(
    panel: &Panel,
    weights: &WeightVector,
    basis: &BasisSystem,
) -> Result<Diagnostics> {
    if weights.len() != panel.n_controls() {
        return Err(Error::Dimension(
            "weight length differs from control count".into(),
        ));
    }
    let block = center_and_expand(panel, basis)?;
    Ok(Diagnostics {
        prefit: panel.pre_objective(weights.as_slice()).sqrt(),
        l1_norm: weights.l1(),
        l2_norm: weights.l2(),
        covariate_imbalance: covariate_imbalance(panel, weights.as_slice()),
        singular_values: block.singular_values(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Fsc,
    Afsc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed(f64),
    /// Cross-validate over the given grid, or the default grid when `None`.
    Cv(Option<Vec<f64>>),
}

/// Everything needed to refit the estimator on a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub estimator: EstimatorKind,
    pub lambda: LambdaPolicy,
    pub basis: BasisKind,
    pub k: usize,
    /// Use the panel's covariates: exact balance for AFSC, penalty weight
    /// `covariate_weight` for FSC.
    pub use_covariates: bool,
    pub covariate_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Afsc,
            lambda: LambdaPolicy::Cv(None),
            basis: BasisKind::BsplineCubic,
            k: 50,
            use_covariates: false,
            covariate_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub weights: WeightVector,
    pub scm: WeightVector,
    pub lambda: Option<f64>,
    pub cv: Option<CvCurve>,
}

/// Basis for a panel; `k` is capped at the grid size.
pub fn basis_for(panel: &Panel, kind: BasisKind, k: usize) -> Result<BasisSystem> {
    build_basis(kind, k.min(panel.grid().len()), panel.grid())
}

/// Fits the configured estimator.
pub fn fit(panel: &Panel, config: &FitConfig, exec: Execution) -> Result<Fit> {
    let cov = config.use_covariates;
    let scm = if cov {
        fit_scm_cov(panel, config.covariate_weight)?
    } else {
        fit_scm(panel)?
    };
    if config.estimator == EstimatorKind::Fsc {
        return Ok(Fit {
            weights: scm.clone(),
            scm,
            lambda: None,
            cv: None,
        });
    }
    let basis = basis_for(panel, config.basis, config.k)?;
    let block = center_and_expand(panel, &basis)?;
    let (lambda, cv) = match &config.lambda {
        LambdaPolicy::Fixed(l) => (*l, None),
        LambdaPolicy::Cv(grid) => {
            let grid = grid.clone().unwrap_or_else(|| default_lambda_grid(&block));
            let curve = cv_lambda(panel, &basis, &grid, cov, exec)?;
            (curve.best_lambda, Some(curve))
        }
    };
    // the ridge step always starts from the plain FSC weights
    let base = if cov { fit_scm(panel)? } else { scm };
    let weights = if cov {
        let (z0, z1) = centered_covariates(panel)?;
        ridge_correction_cov(&block, &z0, &z1, &base, lambda)?
    } else {
        ridge_correction(&block, &base, lambda)?
    };
    Ok(Fit {
        weights,
        scm: base,
        lambda: Some(lambda),
        cv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_panel(rows: &[&[f64]], t0: usize) -> Panel {
        let grid = Arc::new(Grid::counting(1).unwrap());
        let outcomes = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&v| HilbertElement::new(grid.clone(), vec![v]).unwrap())
                    .collect()
            })
            .collect();
        Panel::new(outcomes, t0).unwrap()
    }

    fn vector_panel(n: usize, t: usize, t0: usize, d: usize, seed: u64) -> Panel {
        let grid = Arc::new(Grid::counting(d).unwrap());
        let mut s = seed;
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let outcomes = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| {
                        HilbertElement::new(grid.clone(), (0..d).map(|_| next()).collect()).unwrap()
                    })
                    .collect()
            })
            .collect();
        Panel::new(outcomes, t0).unwrap()
    }

    #[test]
    fn two_units_gives_unit_weight() {
        let p = scalar_panel(&[&[1.0, 2.0], &[5.0, 6.0]], 1);
        assert_eq!(fit_scm(&p).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn perfect_fit_vertex() {
        let p = scalar_panel(
            &[
                &[3.0, 1.0, 2.0, 0.0],
                &[0.0, 1.0, 0.0, 0.0],
                &[1.0, 0.0, 5.0, 0.0],
                &[3.0, 1.0, 2.0, 9.0],
            ],
            3,
        );
        let w = fit_scm(&p).unwrap();
        assert!((w.weights[2] - 1.0).abs() < 1e-8, "{:?}", w.weights);
        assert!(p.pre_objective(w.as_slice()) < 1e-14);
    }

    #[test]
    fn small_instance_matches_grid_search() {
        let p = scalar_panel(
            &[
                &[1.0, 2.0, 3.0, 0.0],
                &[0.0, 0.0, 0.0, 0.0],
                &[2.0, 4.0, 6.0, 0.0],
                &[1.0, 1.0, 1.0, 0.0],
            ],
            3,
        );
        let w = fit_scm(&p).unwrap();
        let mut best = (f64::INFINITY, [0.0; 3]);
        let steps = 1000;
        for a in 0..=steps {
            for b in 0..=(steps - a) {
                let g = [
                    a as f64 / steps as f64,
                    b as f64 / steps as f64,
                    (steps - a - b) as f64 / steps as f64,
                ];
                let f = p.pre_objective(&g);
                if f < best.0 {
                    best = (f, g);
                }
            }
        }
        for j in 0..3 {
            assert!(
                (w.weights[j] - best.1[j]).abs() < 2e-3,
                "{:?} vs {:?}",
                w.weights,
                best.1
            );
        }
    }

    #[test]
    fn simplex_projection_basics() {
        let mut v = [0.2, 0.3, 0.5];
        project_simplex(&mut v);
        assert_eq!(v, [0.2, 0.3, 0.5]);
        let mut v = [2.0, 0.0];
        project_simplex(&mut v);
        assert_eq!(v, [1.0, 0.0]);
        let mut v = [0.0, 0.0, 0.0, 0.0];
        project_simplex(&mut v);
        assert!(v.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn centering_constants_and_column_sums() {
        let p = scalar_panel(&[&[4.0, 1.0, 0.0], &[2.0, 3.0, 0.0], &[2.0, 3.0, 0.0]], 2);
        let basis = build_basis(BasisKind::Standard, 1, p.grid()).unwrap();
        let b = center_and_expand(&p, &basis).unwrap();
        assert!(b.r0.iter().all(|v| *v == 0.0));
        assert_eq!(b.r1.as_slice(), &[2.0, -2.0]);

        let p = vector_panel(7, 4, 3, 5, 11);
        let basis = build_basis(BasisKind::Standard, 5, p.grid()).unwrap();
        let b = center_and_expand(&p, &basis).unwrap();
        for c in 0..b.r0.ncols() {
            assert!(b.r0.column(c).sum().abs() < 1e-10);
        }
        // identity basis: coefficients are the centered values
        let mean0 = (1..7).map(|i| p.outcome(i, 0).values()[2]).sum::<f64>() / 6.0;
        assert!((b.r0[(0, 2)] - (p.outcome(1, 0).values()[2] - mean0)).abs() < 1e-14);
    }

    #[test]
    fn ridge_matches_kkt_oracle() {
        for seed in 0..10 {
            let p = vector_panel(5, 5, 4, 3, seed);
            let basis = build_basis(BasisKind::Standard, 3, p.grid()).unwrap();
            let scm = fit_scm(&p).unwrap();
            let block = center_and_expand(&p, &basis).unwrap();
            for lambda in [1e-3, 0.5, 10.0] {
                let a = ridge_correction(&block, &scm, lambda).unwrap();
                let o = penalized_qp_oracle(&block, &scm, lambda).unwrap();
                for (x, y) in a.weights.iter().zip(&o.weights) {
                    assert!((x - y).abs() < 1e-7);
                }
                assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn huge_lambda_recovers_scm() {
        let p = vector_panel(6, 4, 3, 4, 3);
        let basis = build_basis(BasisKind::Standard, 4, p.grid()).unwrap();
        let scm = fit_scm(&p).unwrap();
        let aug = fit_ridge_augmented(&p, &basis, 1e12).unwrap();
        for (x, y) in aug.weights.iter().zip(&scm.weights) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_fit_needs_no_correction() {
        let p = scalar_panel(&[&[1.0, 1.0, 7.0], &[1.0, 1.0, 0.0], &[1.0, 1.0, 3.0]], 2);
        let basis = build_basis(BasisKind::Standard, 1, p.grid()).unwrap();
        let scm = fit_scm(&p).unwrap();
        let aug = fit_ridge_augmented(&p, &basis, 0.1).unwrap();
        assert_eq!(aug.weights, scm.weights);
    }

    #[test]
    fn zero_r0_oracle_returns_scm() {
        let p = scalar_panel(&[&[4.0, 1.0, 0.0], &[2.0, 3.0, 0.0], &[2.0, 3.0, 0.0]], 2);
        let basis = build_basis(BasisKind::Standard, 1, p.grid()).unwrap();
        let scm = fit_scm(&p).unwrap();
        let block = center_and_expand(&p, &basis).unwrap();
        let o = penalized_qp_oracle(&block, &scm, 1.0).unwrap();
        for (x, y) in o.weights.iter().zip(&scm.weights) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn covariate_balance_and_oracle() {
        let p = vector_panel(8, 4, 3, 3, 5);
        let z = DMatrix::from_fn(8, 2, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64
        });
        let p = p.with_covariates(z).unwrap();
        let basis = build_basis(BasisKind::Standard, 3, p.grid()).unwrap();
        let scm = fit_scm(&p).unwrap();
        let block = center_and_expand(&p, &basis).unwrap();
        for lambda in [1e-3, 1.0, 1e3] {
            let w = fit_ridge_augmented_cov(&p, &basis, lambda).unwrap();
            assert!(covariate_imbalance(&p, w.as_slice()).unwrap() < 1e-8);
            assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            let o = penalized_qp_oracle_cov(&block, &p, &scm, lambda).unwrap();
            for (x, y) in w.weights.iter().zip(&o.weights) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn collinear_covariates_are_named() {
        let p = vector_panel(6, 3, 2, 2, 1);
        let z = DMatrix::from_fn(6, 3, |i, j| match j {
            0 => i as f64,
            1 => (i * i) as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        let p = p.with_covariates(z).unwrap();
        let basis = build_basis(BasisKind::Standard, 2, p.grid()).unwrap();
        assert_eq!(
            fit_ridge_augmented_cov(&p, &basis, 1.0),
            Err(Error::RankDeficient { columns: vec![2] })
        );
    }

    #[test]
    fn vanishing_covariates_reduce_to_plain_ridge() {
        let p = vector_panel(6, 4, 3, 3, 9);
        let p = p.with_covariates(DMatrix::from_element(6, 2, 4.0)).unwrap();
        let basis = build_basis(BasisKind::Standard, 3, p.grid()).unwrap();
        let a = fit_ridge_augmented_cov(&p, &basis, 0.7).unwrap();
        let b = fit_ridge_augmented(&p, &basis, 0.7).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn scm_cov_zero_weight_is_plain_scm() {
        let p = vector_panel(5, 4, 3, 2, 2);
        let p = p
            .with_covariates(DMatrix::from_fn(5, 1, |i, _| i as f64))
            .unwrap();
        let a = fit_scm_cov(&p, 0.0).unwrap();
        let b = fit_scm(&p).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn cv_singleton_and_duplicates() {
        let p = vector_panel(6, 5, 4, 3, 4);
        let basis = build_basis(BasisKind::Standard, 3, p.grid()).unwrap();
        let c = cv_lambda(&p, &basis, &[0.3], false, Execution::Sequential).unwrap();
        assert_eq!(c.best_lambda, 0.3);
        let c = cv_lambda(&p, &basis, &[0.3, 0.3], false, Execution::Parallel).unwrap();
        assert_eq!(c.best_lambda, 0.3);
        assert!((c.scores[0] - c.scores[1]).abs() < 1e-12);
    }

    #[test]
    fn cv_ties_prefer_larger_lambda() {
        // all controls identical: every lambda gives the same weights
        let p = scalar_panel(
            &[
                &[4.0, 1.0, 2.0, 0.0],
                &[2.0, 3.0, 1.0, 0.0],
                &[2.0, 3.0, 1.0, 0.0],
            ],
            3,
        );
        let basis = build_basis(BasisKind::Standard, 1, p.grid()).unwrap();
        let c = cv_lambda(&p, &basis, &[1.0, 5.0, 2.0], false, Execution::Sequential).unwrap();
        assert_eq!(c.best_lambda, 5.0);
    }

    #[test]
    fn diagnostics_cases() {
        let p = scalar_panel(&[&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &[5.0, 2.0, 0.0]], 2);
        let basis = build_basis(BasisKind::Standard, 1, p.grid()).unwrap();
        let w = WeightVector {
            weights: vec![1.0, 0.0],
            kind: WeightKind::Simplex,
        };
        let d = diagnostics(&p, &w, &basis).unwrap();
        assert_eq!(d.prefit, 0.0);
        assert_eq!(d.l2_norm, 1.0);
        assert_eq!(d.covariate_imbalance, None);
    }

    #[test]
    fn bad_lambda_rejected() {
        let p = vector_panel(4, 3, 2, 2, 0);
        let basis = build_basis(BasisKind::Standard, 2, p.grid()).unwrap();
        assert!(matches!(
            fit_ridge_augmented(&p, &basis, 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            fit_ridge_augmented(&p, &basis, f64::NAN),
            Err(Error::InvalidInput(_))
        ));
    }
}
