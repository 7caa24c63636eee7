//! Conformal prediction bands and placebo permutation tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::weights::{fit, FitConfig, Panel, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub period: usize,
    pub alpha: f64,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub radius: Vec<f64>,
}

fn check_alpha(alpha: f64, t0: usize) -> Result<()> {
    let floor = 1.0 / (t0 as f64 + 1.0);
    if !(alpha > floor && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must lie in ({floor}, 1) when T0={t0}, got {alpha}"
        )));
    }
    Ok(())
}

fn check_period(panel: &Panel, weights: &WeightVector, t: usize) -> Result<()> {
    if t >= panel.n_periods() {
        return Err(Error::InvalidInput(format!("period {t} out of range")));
    }
    if weights.len() != panel.n_controls() {
        return Err(Error::Dimension(
            "weight length differs from control count".into(),
        ));
    }
    Ok(())
}

/// 1-based order statistic of the pre-period residuals that bounds the band:
/// the largest radius `r` with `p(center + r) >= alpha`.
pub fn band_rank(t0: usize, alpha: f64) -> usize {
    let m = (t0 as f64 + 1.0) * alpha;
    // guard against m landing a hair above an integer
    let c = (m - 1e-9).ceil() as usize;
    t0 + 2 - c
}

fn pre_residuals(panel: &Panel, weights: &WeightVector) -> Vec<Vec<f64>> {
    (0..panel.t0())
        .map(|s| panel.residual(weights.as_slice(), s).into_values())
        .collect()
}

fn center(panel: &Panel, weights: &WeightVector, t: usize) -> Vec<f64> {
    let y = panel.outcome(0, t).values();
    panel
        .residual(weights.as_slice(), t)
        .values()
        .iter()
        .zip(y)
        .map(|(r, v)| v - r)
        .collect()
}

/// Pointwise band for the counterfactual at period `t`, obtained by
/// inverting the sharp-null residual rank test.
pub fn conformal_band(
    panel: &Panel,
    weights: &WeightVector,
    t: usize,
    alpha: f64,
) -> Result<PredictionBand> {
    check_period(panel, weights, t)?;
    check_alpha(alpha, panel.t0())?;
    let rank = band_rank(panel.t0(), alpha);
    let res = pre_residuals(panel, weights);
    let center = center(panel, weights, t);
    let radius: Vec<f64> = (0..center.len())
        .map(|x| {
            let mut r: Vec<f64> = res.iter().map(|s| s[x].abs()).collect();
            r.sort_by(f64::total_cmp);
            r[rank - 1]
        })
        .collect();
    Ok(PredictionBand {
        period: t,
        alpha,
        lower: center.iter().zip(&radius).map(|(c, q)| c - q).collect(),
        upper: center.iter().zip(&radius).map(|(c, q)| c + q).collect(),
        center,
        radius,
    })
}

/// `p(y0)` at grid coordinate `x`: the rank of the hypothesized post-period
/// residual among the pre-period ones.
pub fn conformal_pvalue(
    y0: f64,
    x: usize,
    panel: &Panel,
    weights: &WeightVector,
    t: usize,
) -> Result<f64> {
    check_period(panel, weights, t)?;
    if x >= panel.grid().len() {
        return Err(Error::InvalidInput(format!("grid index {x} out of range")));
    }
    let c = center(panel, weights, t)[x];
    let post = (y0 - c).abs();
    let count = pre_residuals(panel, weights)
        .iter()
        .filter(|s| post <= s[x].abs())
        .count();
    Ok((count + 1) as f64 / (panel.t0() + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboResult {
    pub period: usize,
    /// Residual norm at `period` with unit i in the treated role; entry 0
    /// is the actual treated unit.
    pub residuals: Vec<f64>,
    pub p_value: f64,
}

/// `(#{i >= 1 : r_0 <= r_i} + 1) / N`.
pub fn placebo_pvalue(residuals: &[f64]) -> f64 {
    let r0 = residuals[0];
    let count = residuals[1..].iter().filter(|&&r| r0 <= r).count();
    (count + 1) as f64 / residuals.len() as f64
}

/// Refits the estimator with each control pretending to be treated. The
/// actually treated unit is left out of every placebo donor pool.
pub fn placebo_test(
    panel: &Panel,
    config: &FitConfig,
    t: usize,
    exec: Execution,
) -> Result<PlaceboResult> {
    let n = panel.n_units();
    if n < 3 {
        return Err(Error::InvalidInput(
            "placebo test needs at least 3 units".into(),
        ));
    }
    if t >= panel.n_periods() {
        return Err(Error::InvalidInput(format!("period {t} out of range")));
    }
    let periods: Vec<usize> = (0..panel.n_periods()).collect();
    // folds inside each refit stay sequential; the outer loop is the parallel one
    let inner = Execution::Sequential;
    let residuals = exec.try_map(n, |i| -> Result<f64> {
        let wrap = |e: Error| Error::Placebo {
            unit: i,
            source: Box::new(e),
        };
        let sub = if i == 0 {
            panel.clone()
        } else {
            let mut units = vec![i];
            units.extend((1..n).filter(|&j| j != i));
            panel.subpanel(&units, &periods, panel.t0()).map_err(wrap)?
        };
        let f = fit(&sub, config, inner).map_err(wrap)?;
        let r = sub.residual(f.weights.as_slice(), t);
        Ok(sub.grid().norm_sq(r.values()).sqrt())
    })?;
    Ok(PlaceboResult {
        period: t,
        p_value: placebo_pvalue(&residuals),
        residuals,
    })
}
