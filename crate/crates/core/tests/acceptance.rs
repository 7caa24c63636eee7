//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::sync::Arc;
use std::time::Instant;

use fsc_core::hilbert::{build_basis, norm, BasisKind, Grid, HilbertElement};
use fsc_core::inference::{conformal_band, conformal_pvalue};
use fsc_core::simulate::{
    ArConfig, Dgp, FactorConfig, FactorShape, McConfig, McEstimator, McResult,
};
use fsc_core::spaces::{MetricObject, MonotoneFix, SpaceAdapter, SpdMetric};
use fsc_core::weights::{
    basis_for, center_and_expand, covariate_imbalance, diagnostics, fit, fit_ridge_augmented,
    fit_ridge_augmented_cov, fit_scm, penalized_qp_oracle, EstimatorKind, FitConfig, Panel,
    WeightKind, WeightVector,
};
use fsc_core::{simulate, Execution};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn panel_from(grid: &Arc<Grid>, rows: Vec<Vec<Vec<f64>>>, t0: usize) -> Panel {
    let outcomes = rows
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| HilbertElement::new(grid.clone(), v).unwrap())
                .collect()
        })
        .collect();
    Panel::new(outcomes, t0).unwrap()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

const STEPS: i64 = 1000;

/// Best point `k / steps` (k >= 0, sum k = steps, lo <= k <= hi) of
/// `|y - sum_i k_i x_i / steps|^2`.
fn lattice_search(x: &[Vec<f64>], y: &[f64], steps: i64, lo: &[i64], hi: &[i64]) -> Vec<i64> {
    struct Search<'a> {
        x: &'a [Vec<f64>],
        y: &'a [f64],
        steps: i64,
        lo: &'a [i64],
        hi: &'a [i64],
        k: Vec<i64>,
        acc: Vec<Vec<f64>>,
        best: (f64, Vec<i64>),
    }
    fn rec(s: &mut Search, i: usize, left: i64) {
        let n = s.x.len();
        let (from, to) = if i + 1 == n {
            (left, left)
        } else {
            (s.lo[i], s.hi[i].min(left))
        };
        if from < s.lo[i] || to > s.hi[i] {
            return;
        }
        for ki in from..=to {
            s.k[i] = ki;
            let w = ki as f64 / s.steps as f64;
            for d in 0..s.y.len() {
                s.acc[i + 1][d] = s.acc[i][d] + w * s.x[i][d];
            }
            if i + 1 == n {
                let obj: f64 =
                    s.y.iter()
                        .zip(&s.acc[n])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                if obj < s.best.0 {
                    s.best = (obj, s.k.clone());
                }
            } else {
                rec(s, i + 1, left - ki);
            }
        }
    }
    let n = x.len();
    let mut s = Search {
        x,
        y,
        steps,
        lo,
        hi,
        k: vec![0; n],
        acc: vec![vec![0.0; y.len()]; n + 1],
        best: (f64::INFINITY, vec![0; n]),
    };
    rec(&mut s, 0, steps);
    s.best.1
}

/// Grid search at step 1e-3. Exhaustive up to three donors; with more, a
/// step-0.02 sweep locates the basin and a 1e-3 box search is recentered
/// until its optimum sits strictly inside the box.
fn brute_force_simplex(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let k = if n <= 3 {
        lattice_search(x, y, STEPS, &vec![0; n], &vec![STEPS; n])
    } else {
        let coarse = 50;
        let kc = lattice_search(x, y, coarse, &vec![0; n], &vec![coarse; n]);
        let mut center: Vec<i64> = kc.iter().map(|c| c * (STEPS / coarse)).collect();
        let radius = 30;
        loop {
            let lo: Vec<i64> = center.iter().map(|c| (c - radius).max(0)).collect();
            let hi: Vec<i64> = center.iter().map(|c| (c + radius).min(STEPS)).collect();
            let kf = lattice_search(x, y, STEPS, &lo, &hi);
            let on_edge = kf
                .iter()
                .zip(lo.iter().zip(&hi))
                .any(|(k, (l, h))| (k == l && *l > 0) || (k == h && *h < STEPS));
            if !on_edge || kf == center {
                break kf;
            }
            center = kf;
        }
    };
    k.iter().map(|&v| v as f64 / STEPS as f64).collect()
}

fn criterion_1() -> Outcome {
    let mut r = rng(101);
    let grid = Arc::new(Grid::counting(1).unwrap());
    let mut worst: f64 = 0.0;
    let mut solve_time = 0.0;
    for inst in 0..50 {
        let n = 2 + inst % 5;
        let t0 = 1 + (inst / 5) % 4;
        // donors in [0,1]^T0, treated unit outside their hull so the
        // minimizer is a unique point on a face
        let mut rows = vec![(0..=t0)
            .map(|_| vec![1.2 + 0.8 * r.random::<f64>()])
            .collect::<Vec<_>>()];
        for _ in 1..n {
            rows.push((0..=t0).map(|_| vec![r.random::<f64>()]).collect());
        }
        let x: Vec<Vec<f64>> = rows[1..]
            .iter()
            .map(|u| u[..t0].iter().map(|v| v[0]).collect())
            .collect();
        let y: Vec<f64> = rows[0][..t0].iter().map(|v| v[0]).collect();
        let panel = panel_from(&grid, rows, t0);
        let start = Instant::now();
        let w = fit_scm(&panel).unwrap();
        solve_time += start.elapsed().as_secs_f64();
        let bf = brute_force_simplex(&x, &y);
        worst = worst.max(linf(w.as_slice(), &bf));
    }
    outcome(
        worst <= 2e-3 && solve_time < 5.0,
        format!("max linf gap {worst:.2e} (tol 2e-3), fit_scm time {solve_time:.3}s (< 5s)"),
    )
}

// ---------------------------------------------------------------- 2

fn random_functional_panel(r: &mut ChaCha8Rng, n: usize, t0: usize, d: usize) -> Panel {
    let grid = Arc::new(Grid::uniform(d, 0.0, 1.0).unwrap());
    let rows = (0..n)
        .map(|_| {
            (0..=t0)
                .map(|_| (0..d).map(|_| gauss(r)).collect())
                .collect()
        })
        .collect();
    panel_from(&grid, rows, t0)
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let kinds = [
        BasisKind::Standard,
        BasisKind::Fourier,
        BasisKind::BsplineCubic,
    ];
    let (mut worst, mut worst_limit): (f64, f64) = (0.0, 0.0);
    for inst in 0..100 {
        let n = r.random_range(3..=10);
        let t0 = r.random_range(2..=5);
        let kind = kinds[inst % 3];
        let d = r.random_range(4..=8);
        let k = r.random_range(
            if kind == BasisKind::BsplineCubic {
                4
            } else {
                1
            }..=d,
        );
        let panel = random_functional_panel(&mut r, n, t0, d);
        let basis = basis_for(&panel, kind, k).unwrap();
        let lambda = 10f64.powf(r.random_range(-3.0..3.0));
        let ridge = fit_ridge_augmented(&panel, &basis, lambda).unwrap();
        let block = center_and_expand(&panel, &basis).unwrap();
        let scm = fit_scm(&panel).unwrap();
        let oracle = penalized_qp_oracle(&block, &scm, lambda).unwrap();
        worst = worst.max(linf(ridge.as_slice(), oracle.as_slice()));
        let limit = fit_ridge_augmented(&panel, &basis, 1e12).unwrap();
        worst_limit = worst_limit.max(linf(limit.as_slice(), scm.as_slice()));
    }
    outcome(
        worst <= 1e-7 && worst_limit <= 1e-6,
        format!("closed form vs KKT {worst:.2e} (tol 1e-7), lambda=1e12 vs fsc {worst_limit:.2e} (tol 1e-6)"),
    )
}

// ---------------------------------------------------------------- 3

struct RidgeBoundCheck {
    a_ok: bool,
    b_ok: bool,
}

fn check_ridge_bounds(panel: &Panel, lambda: f64) -> RidgeBoundCheck {
    let d = panel.grid().len();
    let basis = build_basis(BasisKind::Standard, d, panel.grid()).unwrap();
    let block = center_and_expand(panel, &basis).unwrap();
    let sv = block.singular_values();
    let tol = 1e-10 * sv[0].max(1.0);
    let nz: Vec<f64> = sv.iter().copied().filter(|s| *s > tol).collect();
    let m = nz.len() as f64;
    let (dmax, dmin) = (nz[0], nz[nz.len() - 1]);
    let scm = fit_scm(panel).unwrap();
    let aug = fit_ridge_augmented(panel, &basis, lambda).unwrap();
    let pre_scm = panel.pre_objective(scm.as_slice()).sqrt();
    let pre_aug = panel.pre_objective(aug.as_slice()).sqrt();
    let denom = dmin * dmin + lambda;
    RidgeBoundCheck {
        a_ok: pre_aug <= m.sqrt() * lambda / denom * pre_scm + 1e-6,
        b_ok: aug.l2() <= scm.l2() + m.sqrt() * dmax / denom * pre_scm + 1e-6,
    }
}

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let lambdas = [1e-3, 1.0, 1e3];
    let (mut fails_a, mut fails_b, mut checks) = (0, 0, 0);
    let mut inst = 0;
    while inst < 100 {
        let d = r.random_range(1..=3);
        let t0 = r.random_range(1..=3);
        let n = d * t0 + 2 + r.random_range(0..=3);
        let panel = random_functional_panel(&mut r, n, t0, d);
        let basis = build_basis(BasisKind::Standard, d, panel.grid()).unwrap();
        let sv = center_and_expand(&panel, &basis).unwrap().singular_values();
        // full column rank of the coefficient block
        if sv.len() < d * t0 || sv[d * t0 - 1] < 1e-6 * sv[0] {
            continue;
        }
        inst += 1;
        for &l in &lambdas {
            let c = check_ridge_bounds(&panel, l);
            checks += 1;
            fails_a += usize::from(!c.a_ok);
            fails_b += usize::from(!c.b_ok);
        }
    }
    // information only: more coefficients than donors
    let (mut info_a, mut info_b, mut info_n) = (0, 0, 0);
    for _ in 0..100 {
        let d = r.random_range(2..=4);
        let t0 = r.random_range(2..=4);
        let n = r.random_range(3..=(d * t0).max(4));
        let panel = random_functional_panel(&mut r, n, t0, d);
        for &l in &lambdas {
            let c = check_ridge_bounds(&panel, l);
            info_n += 1;
            info_a += usize::from(!c.a_ok);
            info_b += usize::from(!c.b_ok);
        }
    }
    outcome(
        fails_a == 0 && fails_b == 0,
        format!(
            "{checks} checks, prefit bound failures {fails_a}, weight-norm bound failures {fails_b}; \
             rank-deficient info: {info_a}/{info_n} prefit, {info_b}/{info_n} weight-norm"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut r = rng(404);
    let mut worst: f64 = 0.0;
    let mut errors = 0;
    for _ in 0..50 {
        let n = r.random_range(8..=14);
        let t0 = r.random_range(3..=5);
        let d = r.random_range(4..=6);
        let p = r.random_range(1..=3);
        let panel = random_functional_panel(&mut r, n, t0, d);
        let z = DMatrix::from_fn(n, p, |_, _| gauss(&mut r));
        let panel = panel.with_covariates(z).unwrap();
        let basis = basis_for(&panel, BasisKind::Fourier, d).unwrap();
        for j in 0..10 {
            let lambda = 10f64.powf(-4.0 + j as f64);
            match fit_ridge_augmented_cov(&panel, &basis, lambda) {
                Ok(w) => worst = worst.max(covariate_imbalance(&panel, w.as_slice()).unwrap()),
                Err(_) => errors += 1,
            }
        }
    }
    outcome(
        worst <= 1e-8 && errors == 0,
        format!("max imbalance {worst:.2e} over 500 fits (tol 1e-8), fit errors {errors}"),
    )
}

// ---------------------------------------------------------------- 5

fn random_element(r: &mut ChaCha8Rng, ad: &SpaceAdapter) -> HilbertElement {
    let scale = 10f64.powf(r.random_range(-1.0..1.0));
    let v = (0..ad.grid().len()).map(|_| scale * gauss(r)).collect();
    HilbertElement::new(ad.grid().clone(), v).unwrap()
}

fn dist(a: &HilbertElement, b: &HilbertElement) -> f64 {
    norm(&a.sub(b).unwrap())
}

fn criterion_5() -> Outcome {
    let adapters: Vec<(&str, SpaceAdapter)> = vec![
        (
            "l2",
            SpaceAdapter::l2(Arc::new(Grid::uniform(20, 0.0, 1.0).unwrap())),
        ),
        ("wasserstein", SpaceAdapter::wasserstein(20).unwrap()),
        (
            "wasserstein-isotonic",
            SpaceAdapter::wasserstein(20)
                .unwrap()
                .with_monotone_fix(MonotoneFix::Isotonic),
        ),
        (
            "spd-frobenius",
            SpaceAdapter::spd(3, SpdMetric::Frobenius).unwrap(),
        ),
        (
            "spd-power",
            SpaceAdapter::spd(3, SpdMetric::Power(0.5)).unwrap(),
        ),
        (
            "spd-logeuclidean",
            SpaceAdapter::spd(3, SpdMetric::LogEuclidean).unwrap(),
        ),
        ("laplacian", SpaceAdapter::laplacian(4, 1.0).unwrap()),
        ("composition", SpaceAdapter::composition(4).unwrap()),
    ];
    let mut r = rng(505);
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, ad) in &adapters {
        let (mut nonexp, mut idem, mut reduce) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..1000 {
            let u = random_element(&mut r, ad);
            let v = random_element(&mut r, ad);
            let pu = ad.project(&u).unwrap();
            let pv = ad.project(&v).unwrap();
            nonexp = nonexp.max(dist(&pu, &pv) - dist(&u, &v));
            idem = idem.max(dist(&ad.project(&pu).unwrap(), &pu));
            // pv lies in the image: projecting u can only move it closer
            reduce = reduce.max(dist(&pv, &pu) - dist(&pv, &u));
        }
        let ok = nonexp <= 1e-10 && idem <= 1e-10 && reduce <= 1e-10;
        pass &= ok;
        parts.push(format!("{name}[{nonexp:.0e},{idem:.0e},{reduce:.0e}]"));
    }
    outcome(
        pass,
        format!("worst excess (nonexp, idem, reduce): {}", parts.join(" ")),
    )
}

// ---------------------------------------------------------------- 6

/// `exp(S)` for symmetric `S` by scaling and squaring a truncated Taylor series.
fn expm_taylor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let nrm = s.norm();
    let mut k = 0;
    while nrm / 2f64.powi(k) > 0.25 {
        k += 1;
    }
    let a = s / 2f64.powi(k);
    let n = s.nrows();
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for j in 1..30 {
        term = &term * &a / j as f64;
        sum += &term;
    }
    for _ in 0..k {
        sum = &sum * &sum;
    }
    sum
}

fn random_symmetric(r: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| gauss(r));
    (&a + a.transpose()) * 0.5
}

fn criterion_6() -> Outcome {
    let ad = SpaceAdapter::wasserstein(100).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z: Vec<f64> = ad
        .grid()
        .points()
        .iter()
        .map(|u| normal.inverse_cdf(*u))
        .collect();
    let gaussian =
        |mu: f64, sd: f64| MetricObject::Distribution(z.iter().map(|q| mu + sd * q).collect());
    let mut r = rng(606);
    let mut cases = vec![(0.0, 1.0, 1.0, 2.0)];
    for _ in 0..20 {
        cases.push((
            r.random_range(-1.0..1.0),
            r.random_range(0.5..1.5),
            r.random_range(-1.0..1.0),
            r.random_range(0.5..1.5),
        ));
    }
    let mut w2_err: f64 = 0.0;
    for (m1, s1, m2, s2) in cases {
        let got = ad.distance(&gaussian(m1, s1), &gaussian(m2, s2)).unwrap();
        let exact = ((m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2)).sqrt();
        w2_err = w2_err.max((got - exact).abs());
    }
    let mut le_err: f64 = 0.0;
    for _ in 0..200 {
        let m = r.random_range(2..=5);
        let ad = SpaceAdapter::spd(m, SpdMetric::LogEuclidean).unwrap();
        let la = random_symmetric(&mut r, m);
        let lb = random_symmetric(&mut r, m);
        let a = MetricObject::SpdMatrix(expm_taylor(&la));
        let b = MetricObject::SpdMatrix(expm_taylor(&lb));
        let got = ad.distance(&a, &b).unwrap();
        le_err = le_err.max((got - (&la - &lb).norm()).abs());
    }
    outcome(
        w2_err <= 2e-2 && le_err <= 1e-8,
        format!("Gaussian W2 max error {w2_err:.2e} (tol 2e-2), log-Euclidean max error {le_err:.2e} (tol 1e-8)"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut r = rng(707);
    let mut mismatches = 0usize;
    let mut scanned = 0usize;
    for _ in 0..50 {
        let n = r.random_range(3..=6);
        let t0 = r.random_range(4..=15);
        let d = r.random_range(1..=3);
        let grid = Arc::new(Grid::counting(d).unwrap());
        let rows = (0..n)
            .map(|_| {
                (0..=t0)
                    .map(|_| (0..d).map(|_| gauss(&mut r)).collect())
                    .collect()
            })
            .collect();
        let panel = panel_from(&grid, rows, t0);
        let w = fit_scm(&panel).unwrap();
        let floor = 1.0 / (t0 as f64 + 1.0);
        let alpha = r.random_range(floor + 0.01..0.99);
        let band = conformal_band(&panel, &w, t0, alpha).unwrap();
        for x in 0..d {
            let range = (0..t0)
                .map(|s| panel.residual(w.as_slice(), s).values()[x].abs())
                .fold(0.0, f64::max);
            let step = 1e-3 * range;
            let c = band.center[x];
            for k in -1500..=1500 {
                let y = c + k as f64 * step;
                let inside = (y - c).abs() <= band.radius[x];
                let p = conformal_pvalue(y, x, &panel, &w, t0).unwrap();
                scanned += 1;
                mismatches += usize::from(inside != (p >= alpha));
            }
        }
    }
    // coverage with exchangeable residuals and fixed weights
    let reps = 2000;
    let (t0, n, d) = (19, 6, 3);
    let grid = Arc::new(Grid::counting(d).unwrap());
    let w = WeightVector {
        weights: vec![1.0 / (n - 1) as f64; n - 1],
        kind: WeightKind::Simplex,
    };
    let mut cov_parts = Vec::new();
    let mut cov_ok = true;
    for alpha in [0.1, 0.2] {
        let mut hits = vec![0usize; d];
        for _ in 0..reps {
            let trend: Vec<Vec<f64>> = (0..=t0)
                .map(|_| (0..d).map(|_| 3.0 * gauss(&mut r)).collect())
                .collect();
            let rows: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|_| {
                    trend
                        .iter()
                        .map(|f| f.iter().map(|m| m + gauss(&mut r)).collect())
                        .collect()
                })
                .collect();
            let truth = rows[0][t0].clone();
            let panel = panel_from(&grid, rows, t0);
            let band = conformal_band(&panel, &w, t0, alpha).unwrap();
            for x in 0..d {
                hits[x] += usize::from((truth[x] - band.center[x]).abs() <= band.radius[x]);
            }
        }
        let target = 1.0 - alpha;
        let thr = target - 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt();
        let worst = hits
            .iter()
            .map(|h| *h as f64 / reps as f64)
            .fold(1.0, f64::min);
        cov_ok &= worst >= thr;
        cov_parts.push(format!(
            "alpha={alpha}: min coverage {worst:.4} (>= {thr:.4})"
        ));
    }
    outcome(
        mismatches == 0 && cov_ok,
        format!(
            "{mismatches} band/p-value mismatches in {scanned} scans; {}",
            cov_parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn mc(dgp: &Dgp, reps: usize, estimators: Vec<McEstimator>, deltas: Vec<f64>) -> McResult {
    let cfg = McConfig {
        reps,
        estimators,
        deltas,
        ..McConfig::default()
    };
    simulate::run_monte_carlo(dgp, &cfg, Execution::default()).unwrap()
}

fn med(res: &McResult, label: &str) -> f64 {
    res.summary(label).unwrap().median
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let settings = [
        ("ar", "low", Dgp::Autoregressive(ArConfig::with_noise(0.05))),
        ("ar", "high", Dgp::Autoregressive(ArConfig::with_noise(1.0))),
        ("factor", "low", Dgp::Factor(FactorConfig::with_noise(0.02))),
        ("factor", "high", Dgp::Factor(FactorConfig::with_noise(0.5))),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (model, level, dgp) in &settings {
        let res = mc(dgp, 200, McEstimator::standard_set(), Vec::new());
        let (f, a, lo, hi, g) = (
            med(&res, "fsc"),
            med(&res, "afsc_x1"),
            med(&res, "afsc_x0.01"),
            med(&res, "afsc_x100"),
            med(&res, "agsc"),
        );
        let failures: usize = res.summaries.iter().map(|s| s.failures).sum();
        let mut line = format!(
            "{model}/{level}: fsc={f:.5} afsc={a:.5} afsc(0.01)={lo:.5} afsc(100)={hi:.5} agsc={g:.5} failed_reps={failures}"
        );
        if *level == "low" {
            let ca = a < f;
            let cb = lo < hi;
            pass &= ca && cb;
            line += &format!(" (a){} (b){}", mark(ca), mark(cb));
        } else {
            let top = f.max(a).max(g);
            let bottom = f.min(a).min(g);
            let cc = top <= 1.5 * bottom;
            pass &= cc;
            line += &format!(" (c){} ratio={:.3}", mark(cc), top / bottom);
        }
        pass &= failures == 0;
        parts.push(line);
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 900.0;
    parts.push(format!(
        "runtime {secs:.0}s on {} thread(s)",
        rayon_threads()
    ));
    outcome(pass, parts.join("; "))
}

fn mark(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let deltas = vec![1.0, 2.0, 3.0];
    let ests = vec![McEstimator::Fsc, McEstimator::Afsc { multiplier: 1.0 }];
    let separable = |noise| {
        Dgp::Factor(FactorConfig {
            shape: FactorShape::Separable,
            ..FactorConfig::with_noise(noise)
        })
    };
    let settings = [
        ("ar/low", Dgp::Autoregressive(ArConfig::with_noise(0.05))),
        ("ar/high", Dgp::Autoregressive(ArConfig::with_noise(1.0))),
        ("factor-separable/low", separable(0.02)),
        ("factor-separable/high", separable(0.5)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, dgp) in &settings {
        let res = mc(dgp, 500, ests.clone(), deltas.clone());
        let mut cells = Vec::new();
        for est in ["fsc", "afsc_x1"] {
            for &delta in &deltas {
                match res.violation_rate(est, delta) {
                    Some((rate, count)) => {
                        let p: f64 = (2.0 * (-delta * delta / 2.0).exp()).min(1.0);
                        let thr = p + 3.0 * (p * (1.0 - p) / count as f64).sqrt();
                        let ok = rate <= thr && count == 500;
                        pass &= ok;
                        cells.push(format!(
                            "{est}@{delta}={rate:.3}/{thr:.3}{}",
                            if ok { "" } else { "!" }
                        ));
                    }
                    None => {
                        pass = false;
                        cells.push(format!("{est}@{delta}=n/a"));
                    }
                }
            }
        }
        parts.push(format!("{name}: {}", cells.join(" ")));
    }
    // the cosine factor design of the simulation study: assumption check only
    let cosine = mc(
        &Dgp::Factor(FactorConfig::with_noise(0.02)),
        5,
        ests,
        vec![1.0],
    );
    let holds = cosine.violation_rate("fsc", 1.0).is_some();
    parts.push(format!(
        "factor-cosine: eigen-gap assumption holds={holds} (info)"
    ));
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------- 10

fn prefit_pair(panel: &Panel, config: &FitConfig) -> (f64, f64) {
    let f = fit(panel, config, Execution::default()).unwrap();
    let basis = basis_for(panel, config.basis, config.k).unwrap();
    let aug = diagnostics(panel, &f.weights, &basis).unwrap().prefit;
    let scm = diagnostics(panel, &f.scm, &basis).unwrap().prefit;
    (scm, aug)
}

fn criterion_10() -> Outcome {
    let mut r = rng(1010);
    let afsc = FitConfig {
        estimator: EstimatorKind::Afsc,
        ..FitConfig::default()
    };
    let mut fails = 0;
    let mut total = 0;
    let mut gains: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, (scm, aug): (f64, f64), fails: &mut usize| {
        total += 1;
        if aug > scm {
            *fails += 1;
        }
        gains.push((name.to_string(), 1.0 - aug / scm));
    };

    // smooth curves: amplitude/phase/slope families
    for _ in 0..10 {
        let ad = SpaceAdapter::l2(Arc::new(Grid::uniform(100, 0.0, 1.0).unwrap()));
        let (n, t0, t) = (20, 8, 12);
        let rows = (0..n)
            .map(|_| {
                let (a, b, ph) = (
                    1.0 + 0.3 * gauss(&mut r),
                    0.5 * gauss(&mut r),
                    0.3 * gauss(&mut r),
                );
                (0..t)
                    .map(|s| {
                        let shift = 0.1 * s as f64;
                        ad.grid()
                            .points()
                            .iter()
                            .map(|x| {
                                a * (6.0 * x + ph + shift).sin() + b * x + 0.05 * gauss(&mut r)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let panel = panel_from(ad.grid(), rows, t0);
        record("curves", prefit_pair(&panel, &afsc), &mut fails);
    }

    // quantile functions of location-scale families
    let normal = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..10 {
        let ad = SpaceAdapter::wasserstein(100).unwrap();
        let z: Vec<f64> = ad
            .grid()
            .points()
            .iter()
            .map(|u| normal.inverse_cdf(*u))
            .collect();
        let (n, t0, t) = (20, 8, 12);
        let rows = (0..n)
            .map(|_| {
                let (m0, s0) = (gauss(&mut r), 0.2 * gauss(&mut r));
                (0..t)
                    .map(|s| {
                        let mu = m0 + 0.1 * s as f64 + 0.05 * gauss(&mut r);
                        let sd = (s0 + 0.02 * s as f64 + 0.05 * gauss(&mut r)).exp();
                        z.iter().map(|q| mu + sd * q).collect()
                    })
                    .collect()
            })
            .collect();
        let panel = panel_from(ad.grid(), rows, t0);
        record("quantiles", prefit_pair(&panel, &afsc), &mut fails);
    }

    // 9x9 rank-one deviation covariances
    for _ in 0..10 {
        let ad = SpaceAdapter::spd(9, SpdMetric::Frobenius).unwrap();
        let (n, t0, t) = (15, 5, 10);
        let base: Vec<DVector<f64>> = (0..t)
            .map(|_| DVector::from_fn(9, |_, _| gauss(&mut r)))
            .collect();
        let q: Vec<Vec<DVector<f64>>> = (0..n)
            .map(|_| {
                let load = 1.0 + 0.3 * gauss(&mut r);
                base.iter()
                    .map(|b| b * load + DVector::from_fn(9, |_, _| 0.3 * gauss(&mut r)))
                    .collect()
            })
            .collect();
        let rows = (0..n)
            .map(|i| {
                (0..t)
                    .map(|s| {
                        let mean = q.iter().map(|u| &u[s]).sum::<DVector<f64>>() / n as f64;
                        let dev = &q[i][s] - mean;
                        let obj = MetricObject::SpdMatrix(&dev * dev.transpose());
                        ad.embed(&obj).unwrap().into_values()
                    })
                    .collect()
            })
            .collect();
        let panel = panel_from(ad.grid(), rows, t0);
        let cfg = FitConfig {
            basis: BasisKind::Standard,
            k: 81,
            ..afsc.clone()
        };
        record("covariances", prefit_pair(&panel, &cfg), &mut fails);
    }
    let summary: Vec<String> = ["curves", "quantiles", "covariances"]
        .iter()
        .map(|k| {
            let g: Vec<f64> = gains
                .iter()
                .filter(|(n, _)| n == k)
                .map(|(_, v)| *v)
                .collect();
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            format!("{k} mean prefit reduction {:.1}%", 100.0 * mean)
        })
        .collect();
    outcome(
        fails == 0,
        format!(
            "{fails}/{total} instances with prefit(AFSC) > prefit(FSC); {}",
            summary.join(", ")
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture; a bare word filters
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 qp-oracle", criterion_1),
        ("2 ridge-oracle", criterion_2),
        ("3 ridge-bounds", criterion_3),
        ("4 covariate-balance", criterion_4),
        ("5 projections", criterion_5),
        ("6 isometries", criterion_6),
        ("7 conformal", criterion_7),
        ("8 simulation-orderings", criterion_8),
        ("9 error-bounds", criterion_9),
        ("10 stand-in-pipelines", criterion_10),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!(
            "criterion {name}: {status} ({:.1}s) {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
