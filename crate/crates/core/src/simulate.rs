//! Simulation designs, the Monte Carlo harness, and numerical checks of the
//! finite-sample error bounds.
//!
//! Every draw comes from a `ChaCha8Rng` seeded with the master seed; frozen
//! design quantities use stream 0 and replication `r` uses stream `r + 1`,
//! so replications can run in any order.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hilbert::{build_basis, BasisKind, BasisSystem, Grid, HilbertElement};
use crate::weights::{
    center_and_expand, cv_lambda, default_lambda_grid, fit_scm, ridge_correction, Panel,
    WeightVector,
};

/// Uniform midpoint grid on [0, 1] used by both designs.
pub fn sim_grid(n: usize) -> Result<Arc<Grid>> {
    Ok(Arc::new(Grid::uniform(n, 0.0, 1.0)?))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `g_1 = 1`, `g_l = sqrt(2) cos((l - 1) pi x)`.
fn cosine(l: usize, x: f64) -> f64 {
    if l == 1 {
        1.0
    } else {
        2f64.sqrt() * ((l - 1) as f64 * std::f64::consts::PI * x).cos()
    }
}

fn error_shapes(x: f64) -> [f64; 4] {
    [1.0, x.sqrt(), x.cbrt(), x.powf(0.25)]
}

/// One draw of `e1 + e2 x^(1/2) + e3 x^(1/3) + e4 x^(1/4)`, `e_k ~ U[-C, C]`.
pub fn draw_error<R: Rng + ?Sized>(rng: &mut R, c: f64, grid: &Arc<Grid>) -> HilbertElement {
    let e: [f64; 4] = std::array::from_fn(|_| {
        if c > 0.0 {
            rng.random_range(-c..=c)
        } else {
            0.0
        }
    });
    let v = grid
        .points()
        .iter()
        .map(|&x| error_shapes(x).iter().zip(&e).map(|(f, e)| f * e).sum())
        .collect();
    HilbertElement::new(grid.clone(), v).expect("finite")
}

/// Almost-sure bound on the error norm: every component at `+C`.
pub fn error_norm_bound(c: f64, grid: &Grid) -> f64 {
    let v: Vec<f64> = grid
        .points()
        .iter()
        .map(|&x| c * error_shapes(x).iter().sum::<f64>())
        .collect();
    grid.norm_sq(&v).sqrt()
}

/// Covariates `Z ~ N(0, 1)` with loading functions `eta_l = scale * g_{l+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateDesign {
    pub p: usize,
    pub scale: f64,
}

impl CovariateDesign {
    fn eta(&self, grid: &Arc<Grid>) -> Vec<Vec<f64>> {
        (0..self.p)
            .map(|l| {
                grid.points()
                    .iter()
                    .map(|&x| self.scale * cosine(l + 2, x))
                    .collect()
            })
            .collect()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, self.p, |_, _| rng.sample(StandardNormal))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub n: usize,
    pub t: usize,
    pub t0: usize,
    pub grid_size: usize,
    /// Kernel multipliers for lags 1, 2, 3, ...
    pub lag_weights: Vec<f64>,
    pub kernel_sd: f64,
    pub noise: f64,
    pub covariates: Option<CovariateDesign>,
    pub seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            n: 50,
            t: 10,
            t0: 9,
            grid_size: 100,
            lag_weights: vec![0.6, 0.3, 0.1],
            kernel_sd: 0.1,
            noise: 0.05,
            covariates: None,
            seed: 20_250_101,
        }
    }
}

impl ArConfig {
    pub fn with_noise(noise: f64) -> Self {
        Self {
            noise,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FactorShape {
    /// `mu_11 = 1`, `mu_jt = sqrt(2) cos((j + t) pi x)`.
    #[default]
    Cosine,
    /// `mu_jt(x) = a_tj (0.75 + 0.25 cos(pi x))` with fixed `a_tj ~ U[-1, 1]`;
    /// keeps `mu(x)'mu(x)` well conditioned at every x.
    Separable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorConfig {
    pub n: usize,
    pub t: usize,
    pub t0: usize,
    pub grid_size: usize,
    pub j: usize,
    pub loading_sd: f64,
    pub noise: f64,
    pub shape: FactorShape,
    pub covariates: Option<CovariateDesign>,
    pub seed: u64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            n: 50,
            t: 10,
            t0: 9,
            grid_size: 100,
            j: 5,
            loading_sd: 0.1,
            noise: 0.02,
            shape: FactorShape::Cosine,
            covariates: None,
            seed: 20_250_102,
        }
    }
}

impl FactorConfig {
    pub fn with_noise(noise: f64) -> Self {
        Self {
            noise,
            ..Self::default()
        }
    }
}

/// What the bound checks need to know about the generating process.
#[derive(Debug, Clone, PartialEq)]
pub enum DgpInternals {
    Autoregressive {
        /// `|beta_t|` for every pre-period (zero where no kernel acts).
        beta_norms: Vec<f64>,
        sigma: f64,
        eta_norms: Vec<f64>,
    },
    Factor {
        j: usize,
        t0: usize,
        m1: f64,
        m2: f64,
        sigma: f64,
        /// `|eta_lt|` over all periods and covariates.
        eta_norms: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub panel: Panel,
    /// Untreated outcome of the treated unit at the last period.
    pub truth: HilbertElement,
    pub internals: DgpInternals,
}

fn check_shape(n: usize, t: usize, t0: usize, grid: usize) -> Result<()> {
    if n < 2 || t != t0 + 1 || t0 == 0 || grid == 0 {
        return Err(Error::InvalidInput(format!(
            "simulation needs N >= 2, T = T0 + 1, T0 >= 1 and a grid (got N={n}, T={t}, T0={t0})"
        )));
    }
    Ok(())
}

/// Kernel matrices `beta(x_i, y_j)` with the pre-period index each one acts on.
fn ar_kernels(cfg: &ArConfig, grid: &Grid) -> Vec<(usize, DMatrix<f64>)> {
    let sd = cfg.kernel_sd;
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let pts = grid.points();
    cfg.lag_weights
        .iter()
        .enumerate()
        .filter(|(l, _)| *l < cfg.t0)
        .map(|(l, &c)| {
            let k = DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
                let z = (pts[j] - pts[i]) / sd;
                c * norm * (-0.5 * z * z).exp()
            });
            (cfg.t0 - 1 - l, k)
        })
        .collect()
}

fn kernel_norm(k: &DMatrix<f64>, grid: &Grid) -> f64 {
    let w = grid.weights();
    let mut s = 0.0;
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            s += w[i] * w[j] * k[(i, j)] * k[(i, j)];
        }
    }
    s.sqrt()
}

/// `x -> <k(x, .), f>`.
fn apply_kernel(k: &DMatrix<f64>, f: &[f64], grid: &Grid) -> Vec<f64> {
    let wf: Vec<f64> = f.iter().zip(grid.weights()).map(|(a, b)| a * b).collect();
    (k * DVector::from_vec(wf)).iter().copied().collect()
}

/// Autoregressive design. Pre-period outcomes (and covariates, if any) are
/// frozen by the config seed; replication `rep` draws the post-period errors.
pub fn gen_autoregressive(cfg: &ArConfig, rep: u64) -> Result<Simulated> {
    check_shape(cfg.n, cfg.t, cfg.t0, cfg.grid_size)?;
    let grid = sim_grid(cfg.grid_size)?;
    let mut frozen = rng_for(cfg.seed, 0);
    let bound = 3f64.sqrt() / 100.0;
    let basis: Vec<Vec<f64>> = (1..=10)
        .map(|l| {
            grid.points()
                .iter()
                .map(|&x| (l as f64).powf(-1.2) * cosine(l, x))
                .collect()
        })
        .collect();
    let mut units: Vec<Vec<HilbertElement>> = (0..cfg.n)
        .map(|_| {
            (0..cfg.t0)
                .map(|_| {
                    let mut v = vec![0.0; grid.len()];
                    for g in &basis {
                        let u: f64 = frozen.random_range(-bound..=bound);
                        for (a, b) in v.iter_mut().zip(g) {
                            *a += u * b;
                        }
                    }
                    HilbertElement::new(grid.clone(), v).expect("finite")
                })
                .collect()
        })
        .collect();
    let z = cfg.covariates.map(|d| d.draw(&mut frozen, cfg.n));
    let eta = cfg.covariates.map(|d| d.eta(&grid));

    let kernels = ar_kernels(cfg, &grid);
    let mut rng = rng_for(cfg.seed, rep + 1);
    for (i, row) in units.iter_mut().enumerate() {
        let mut v = vec![0.0; grid.len()];
        for (s, k) in &kernels {
            for (a, b) in v.iter_mut().zip(apply_kernel(k, row[*s].values(), &grid)) {
                *a += b;
            }
        }
        if let (Some(z), Some(eta)) = (&z, &eta) {
            for (l, e) in eta.iter().enumerate() {
                for (a, b) in v.iter_mut().zip(e) {
                    *a += z[(i, l)] * b;
                }
            }
        }
        let eps = draw_error(&mut rng, cfg.noise, &grid);
        for (a, b) in v.iter_mut().zip(eps.values()) {
            *a += b;
        }
        row.push(HilbertElement::new(grid.clone(), v).expect("finite"));
    }
    let truth = units[0][cfg.t0].clone();
    let mut beta_norms = vec![0.0; cfg.t0];
    for (s, k) in &kernels {
        beta_norms[*s] = kernel_norm(k, &grid);
    }
    let eta_norms = eta
        .map(|e| e.iter().map(|v| grid.norm_sq(v).sqrt()).collect())
        .unwrap_or_default();
    let mut panel = Panel::new(units, cfg.t0)?;
    if let Some(z) = z {
        panel = panel.with_covariates(z)?;
    }
    Ok(Simulated {
        panel,
        truth,
        internals: DgpInternals::Autoregressive {
            beta_norms,
            sigma: error_norm_bound(cfg.noise, &grid),
            eta_norms,
        },
    })
}

/// Factor functions `mu[j][t]` on the grid.
fn factor_functions(cfg: &FactorConfig, grid: &Grid) -> Vec<Vec<Vec<f64>>> {
    let pts = grid.points();
    match cfg.shape {
        FactorShape::Cosine => (1..=cfg.j)
            .map(|j| {
                (1..=cfg.t)
                    .map(|t| {
                        pts.iter()
                            .map(|&x| {
                                if j == 1 && t == 1 {
                                    1.0
                                } else {
                                    2f64.sqrt() * ((j + t) as f64 * std::f64::consts::PI * x).cos()
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        FactorShape::Separable => {
            let mut rng = rng_for(cfg.seed ^ 0x5eed_fac7, 0);
            let a = DMatrix::from_fn(cfg.t, cfg.j, |_, _| rng.random_range(-1.0..=1.0));
            (0..cfg.j)
                .map(|j| {
                    (0..cfg.t)
                        .map(|t| {
                            pts.iter()
                                .map(|&x| {
                                    a[(t, j)] * (0.75 + 0.25 * (std::f64::consts::PI * x).cos())
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// `M1 = max |mu_jt(x)|`, `M2 = min_x lambda_min(mu(x)'mu(x))` over pre-periods.
fn factor_constants(mu: &[Vec<Vec<f64>>], t0: usize, grid_len: usize) -> (f64, f64) {
    let m1 = mu
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let j = mu.len();
    let m2 = (0..grid_len)
        .map(|x| {
            let m = DMatrix::from_fn(t0, j, |t, jj| mu[jj][t][x]);
            SymmetricEigen::new(m.transpose() * m).eigenvalues.min()
        })
        .fold(f64::INFINITY, f64::min);
    (m1, m2)
}

/// Latent factor design; loadings, covariates and errors are redrawn every
/// replication.
pub fn gen_latent_factor(cfg: &FactorConfig, rep: u64) -> Result<Simulated> {
    let mut rng = rng_for(cfg.seed, rep + 1);
    let normal = Normal::new(0.0, cfg.loading_sd)
        .map_err(|e| Error::InvalidInput(format!("loading sd: {e}")))?;
    let loadings = DMatrix::from_fn(cfg.n, cfg.j, |_, _| normal.sample(&mut rng));
    gen_latent_factor_with(cfg, &loadings, &mut rng)
}

/// Latent factor design with caller-supplied loadings (N x J).
pub fn gen_latent_factor_with_loadings(
    cfg: &FactorConfig,
    loadings: &DMatrix<f64>,
    rep: u64,
) -> Result<Simulated> {
    let mut rng = rng_for(cfg.seed, rep + 1);
    gen_latent_factor_with(cfg, loadings, &mut rng)
}

fn gen_latent_factor_with(
    cfg: &FactorConfig,
    loadings: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Simulated> {
    check_shape(cfg.n, cfg.t, cfg.t0, cfg.grid_size)?;
    if loadings.shape() != (cfg.n, cfg.j) {
        return Err(Error::Dimension(format!(
            "loadings must be {} x {}",
            cfg.n, cfg.j
        )));
    }
    let grid = sim_grid(cfg.grid_size)?;
    let mu = factor_functions(cfg, &grid);
    let z = cfg.covariates.map(|d| d.draw(rng, cfg.n));
    let eta = cfg.covariates.map(|d| d.eta(&grid));
    let units: Vec<Vec<HilbertElement>> = (0..cfg.n)
        .map(|i| {
            (0..cfg.t)
                .map(|t| {
                    let mut v = vec![0.0; grid.len()];
                    for (j, muj) in mu.iter().enumerate() {
                        for (a, b) in v.iter_mut().zip(&muj[t]) {
                            *a += loadings[(i, j)] * b;
                        }
                    }
                    if let (Some(z), Some(eta)) = (&z, &eta) {
                        for (l, e) in eta.iter().enumerate() {
                            for (a, b) in v.iter_mut().zip(e) {
                                *a += z[(i, l)] * b;
                            }
                        }
                    }
                    let eps = draw_error(rng, cfg.noise, &grid);
                    for (a, b) in v.iter_mut().zip(eps.values()) {
                        *a += b;
                    }
                    HilbertElement::new(grid.clone(), v).expect("finite")
                })
                .collect()
        })
        .collect();
    let truth = units[0][cfg.t0].clone();
    let (m1, m2) = factor_constants(&mu, cfg.t0, grid.len());
    // eta does not vary with t here, so each period contributes the same norms
    let eta_norms = eta
        .map(|e| {
            (0..cfg.t)
                .flat_map(|_| e.iter().map(|v| grid.norm_sq(v).sqrt()))
                .collect()
        })
        .unwrap_or_default();
    let mut panel = Panel::new(units, cfg.t0)?;
    if let Some(z) = z {
        panel = panel.with_covariates(z)?;
    }
    Ok(Simulated {
        panel,
        truth,
        internals: DgpInternals::Factor {
            j: cfg.j,
            t0: cfg.t0,
            m1,
            m2,
            sigma: error_norm_bound(cfg.noise, &grid),
            eta_norms,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dgp {
    Autoregressive(ArConfig),
    Factor(FactorConfig),
}

impl Dgp {
    pub fn generate(&self, rep: u64) -> Result<Simulated> {
        match self {
            Dgp::Autoregressive(c) => gen_autoregressive(c, rep),
            Dgp::Factor(c) => gen_latent_factor(c, rep),
        }
    }

    pub fn grid_size(&self) -> usize {
        match self {
            Dgp::Autoregressive(c) => c.grid_size,
            Dgp::Factor(c) => c.grid_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub realized: f64,
    /// Right-hand side; `None` when the factor-rank assumption fails.
    pub rhs: Option<f64>,
    pub fit_term: f64,
    pub weight_term: f64,
    pub noise_term: f64,
    pub covariate_term: f64,
    pub prefit: f64,
    pub sigma: f64,
    pub assumption_ok: bool,
    pub violated: bool,
}

fn realized_error(sim: &Simulated, weights: &WeightVector) -> f64 {
    let t = sim.panel.t0();
    let r = sim.panel.residual(weights.as_slice(), t);
    let d = r
        .sub(&sim.panel.outcome(0, t).sub(&sim.truth).expect("same grid"))
        .expect("same grid");
    sim.panel.grid().norm_sq(d.values()).sqrt()
}

fn covariate_gap(sim: &Simulated, weights: &WeightVector) -> f64 {
    crate::weights::covariate_imbalance(&sim.panel, weights.as_slice()).unwrap_or(0.0)
}

fn finish(
    delta: f64,
    realized: f64,
    terms: [f64; 4],
    prefit: f64,
    sigma: f64,
    assumption_ok: bool,
) -> BoundReport {
    let rhs = assumption_ok.then(|| terms.iter().sum::<f64>());
    BoundReport {
        delta,
        realized,
        fit_term: terms[0],
        weight_term: terms[1],
        noise_term: terms[2],
        covariate_term: terms[3],
        violated: rhs.is_some_and(|r| realized > r),
        rhs,
        prefit,
        sigma,
        assumption_ok,
    }
}

/// Error bound under the autoregressive model (with the covariate term when
/// the design has covariates).
pub fn evaluate_bound_auto(
    sim: &Simulated,
    weights: &WeightVector,
    delta: f64,
) -> Result<BoundReport> {
    let DgpInternals::Autoregressive {
        beta_norms,
        sigma,
        eta_norms,
    } = &sim.internals
    else {
        return Err(Error::InvalidInput(
            "not an autoregressive simulation".into(),
        ));
    };
    let prefit = sim.panel.pre_objective(weights.as_slice()).sqrt();
    let beta = beta_norms.iter().map(|b| b * b).sum::<f64>().sqrt();
    let eta = eta_norms.iter().map(|b| b * b).sum::<f64>().sqrt();
    let terms = [
        beta * prefit,
        0.0,
        delta * sigma * (1.0 + weights.l2()),
        eta * covariate_gap(sim, weights),
    ];
    Ok(finish(
        delta,
        realized_error(sim, weights),
        terms,
        prefit,
        *sigma,
        true,
    ))
}

/// Error bound under the latent factor model.
pub fn evaluate_bound_factor(
    sim: &Simulated,
    weights: &WeightVector,
    delta: f64,
) -> Result<BoundReport> {
    let DgpInternals::Factor {
        j,
        t0,
        m1,
        m2,
        sigma,
        eta_norms,
    } = &sim.internals
    else {
        return Err(Error::InvalidInput("not a factor simulation".into()));
    };
    let prefit = sim.panel.pre_objective(weights.as_slice()).sqrt();
    // treat numerically singular mu(x)'mu(x) as a violation of the rank condition
    let ok = *m2 > 1e-10 * m1 * m1;
    let c = m1 * m1 * (*j as f64).powf(1.5) / m2;
    let c0 = c / (*t0 as f64).sqrt();
    let eta = eta_norms.iter().map(|b| b * b).sum::<f64>().sqrt();
    let terms = if ok {
        [
            c0 * prefit,
            2.0 * sigma * c * weights.l1(),
            delta * sigma * (1.0 + weights.l2()),
            2f64.sqrt() * c0.max(1.0) * eta * covariate_gap(sim, weights),
        ]
    } else {
        [
            f64::INFINITY,
            f64::INFINITY,
            delta * sigma * (1.0 + weights.l2()),
            0.0,
        ]
    };
    Ok(finish(
        delta,
        realized_error(sim, weights),
        terms,
        prefit,
        *sigma,
        ok,
    ))
}

pub fn evaluate_bound(sim: &Simulated, weights: &WeightVector, delta: f64) -> Result<BoundReport> {
    match sim.internals {
        DgpInternals::Autoregressive { .. } => evaluate_bound_auto(sim, weights, delta),
        DgpInternals::Factor { .. } => evaluate_bound_factor(sim, weights, delta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum McEstimator {
    Fsc,
    /// Ridge-augmented FSC at `multiplier * lambda_cv`.
    Afsc {
        multiplier: f64,
    },
    /// Linear-regression augmentation of FSC.
    Agsc,
}

impl McEstimator {
    pub fn label(&self) -> String {
        match self {
            McEstimator::Fsc => "fsc".into(),
            McEstimator::Afsc { multiplier } => format!("afsc_x{multiplier}"),
            McEstimator::Agsc => "agsc".into(),
        }
    }

    /// The estimator set compared in the simulation study.
    pub fn standard_set() -> Vec<McEstimator> {
        vec![
            McEstimator::Fsc,
            McEstimator::Afsc { multiplier: 100.0 },
            McEstimator::Afsc { multiplier: 1.0 },
            McEstimator::Afsc { multiplier: 0.01 },
            McEstimator::Agsc,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub reps: usize,
    pub estimators: Vec<McEstimator>,
    pub basis: BasisKind,
    pub k: usize,
    /// CV grid; the default grid of the first replication's panel when `None`.
    pub lambda_grid: Option<Vec<f64>>,
    /// Bound deltas evaluated for FSC and AFSC at `lambda_cv`.
    pub deltas: Vec<f64>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            reps: 500,
            estimators: McEstimator::standard_set(),
            basis: BasisKind::BsplineCubic,
            k: 50,
            lambda_grid: None,
            deltas: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: String,
    /// Per-replication error; `None` where the replication failed.
    pub errors: Vec<Option<f64>>,
    pub failures: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub rep: usize,
    pub estimator: String,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub summaries: Vec<McSummary>,
    pub lambda_cv: Vec<Option<f64>>,
    pub bounds: Vec<BoundRecord>,
    pub rep_errors: Vec<(usize, String)>,
}

impl McResult {
    pub fn summary(&self, label: &str) -> Option<&McSummary> {
        self.summaries.iter().find(|s| s.estimator == label)
    }

    /// Fraction of replications violating the bound, over those where the
    /// bound applies; `None` when it never applies.
    pub fn violation_rate(&self, estimator: &str, delta: f64) -> Option<(f64, usize)> {
        let recs: Vec<&BoundReport> = self
            .bounds
            .iter()
            .filter(|b| {
                b.estimator == estimator && b.report.delta == delta && b.report.assumption_ok
            })
            .map(|b| &b.report)
            .collect();
        if recs.is_empty() {
            return None;
        }
        let v = recs.iter().filter(|r| r.violated).count();
        Some((v as f64 / recs.len() as f64, recs.len()))
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Regression augmentation: `alpha` from least squares of the last period on
/// the pre-periods over controls, then `Yhat_scm + m_1 - sum g_i m_i`.
pub fn agsc_estimate(panel: &Panel, scm: &WeightVector) -> Result<HilbertElement> {
    let (t0, n) = (panel.t0(), panel.n_units());
    let grid = panel.grid();
    let post = panel.n_periods() - 1;
    let mut a = DMatrix::<f64>::zeros(t0, t0);
    let mut c = DVector::<f64>::zeros(t0);
    for i in 1..n {
        for s in 0..t0 {
            let ys = panel.outcome(i, s).values();
            c[s] += grid.dot(ys, panel.outcome(i, post).values());
            for t in 0..t0 {
                a[(s, t)] += grid.dot(ys, panel.outcome(i, t).values());
            }
        }
    }
    let alpha = a
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&c))
        .or_else(|| a.svd(true, true).solve(&c, 1e-12).ok())
        .ok_or_else(|| Error::Numeric {
            reason: "regression normal equations are singular".into(),
            condition: f64::INFINITY,
        })?;
    let m = |i: usize| -> Vec<f64> {
        let mut v = vec![0.0; grid.len()];
        for s in 0..t0 {
            for (x, y) in v.iter_mut().zip(panel.outcome(i, s).values()) {
                *x += alpha[s] * y;
            }
        }
        v
    };
    let mut out = m(0);
    for (i, w) in scm.as_slice().iter().enumerate() {
        let mi = m(i + 1);
        for ((o, y), mm) in out
            .iter_mut()
            .zip(panel.outcome(i + 1, post).values())
            .zip(&mi)
        {
            *o += w * (y - mm);
        }
    }
    HilbertElement::new(grid.clone(), out)
}

struct RepOutcome {
    errors: Vec<Option<f64>>,
    lambda: Option<f64>,
    bounds: Vec<BoundRecord>,
    failure: Option<String>,
}

fn run_rep(
    dgp: &Dgp,
    cfg: &McConfig,
    basis: &BasisSystem,
    grid_lambdas: &[f64],
    rep: usize,
) -> Result<RepOutcome> {
    let sim = dgp.generate(rep as u64)?;
    let panel = &sim.panel;
    let scm = fit_scm(panel)?;
    let needs_cv = cfg
        .estimators
        .iter()
        .any(|e| matches!(e, McEstimator::Afsc { .. }))
        || !cfg.deltas.is_empty();
    let mut lambda = None;
    let mut block = None;
    if needs_cv {
        let b = center_and_expand(panel, basis)?;
        let grid_own;
        let lambdas = if grid_lambdas.is_empty() {
            grid_own = default_lambda_grid(&b);
            &grid_own[..]
        } else {
            grid_lambdas
        };
        lambda = Some(cv_lambda(panel, basis, lambdas, false, Execution::Sequential)?.best_lambda);
        block = Some(b);
    }
    let err_of = |w: &WeightVector| realized_error(&sim, w);
    let mut errors = Vec::with_capacity(cfg.estimators.len());
    for e in &cfg.estimators {
        let v = match e {
            McEstimator::Fsc => err_of(&scm),
            McEstimator::Afsc { multiplier } => {
                let w =
                    ridge_correction(block.as_ref().unwrap(), &scm, multiplier * lambda.unwrap())?;
                err_of(&w)
            }
            McEstimator::Agsc => {
                let est = agsc_estimate(panel, &scm)?;
                let d = sim.truth.sub(&est)?;
                panel.grid().norm_sq(d.values()).sqrt()
            }
        };
        errors.push(Some(v));
    }
    let mut bounds = Vec::new();
    if !cfg.deltas.is_empty() {
        let aug = ridge_correction(block.as_ref().unwrap(), &scm, lambda.unwrap())?;
        for (label, w) in [("fsc", &scm), ("afsc_x1", &aug)] {
            for &d in &cfg.deltas {
                bounds.push(BoundRecord {
                    rep,
                    estimator: label.into(),
                    report: evaluate_bound(&sim, w, d)?,
                });
            }
        }
    }
    Ok(RepOutcome {
        errors,
        lambda,
        bounds,
        failure: None,
    })
}

/// Runs `cfg.reps` replications; a failing replication is recorded and
/// skipped rather than aborting the run.
pub fn run_monte_carlo(dgp: &Dgp, cfg: &McConfig, exec: Execution) -> Result<McResult> {
    if cfg.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    let grid = sim_grid(dgp.grid_size())?;
    let basis = build_basis(cfg.basis, cfg.k.min(grid.len()), &grid)?;
    let lambdas = cfg.lambda_grid.clone().unwrap_or_default();
    let outcomes = exec.map(cfg.reps, |rep| {
        run_rep(dgp, cfg, &basis, &lambdas, rep).unwrap_or_else(|e| RepOutcome {
            errors: vec![None; cfg.estimators.len()],
            lambda: None,
            bounds: Vec::new(),
            failure: Some(e.to_string()),
        })
    });
    let summaries = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let errors: Vec<Option<f64>> = outcomes.iter().map(|o| o.errors[k]).collect();
            let mut ok: Vec<f64> = errors.iter().flatten().copied().collect();
            ok.sort_by(f64::total_cmp);
            McSummary {
                estimator: e.label(),
                failures: errors.iter().filter(|v| v.is_none()).count(),
                median: quantile_sorted(&ok, 0.5),
                q1: quantile_sorted(&ok, 0.25),
                q3: quantile_sorted(&ok, 0.75),
                errors,
            }
        })
        .collect();
    Ok(McResult {
        summaries,
        lambda_cv: outcomes.iter().map(|o| o.lambda).collect(),
        rep_errors: outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.failure.clone().map(|f| (i, f)))
            .collect(),
        bounds: outcomes.into_iter().flat_map(|o| o.bounds).collect(),
    })
}
