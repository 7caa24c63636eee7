//! Counterfactual predictions and treatment-effect summaries.

use crate::error::{Error, Result};
use crate::hilbert::{lincomb, norm, HilbertElement};
use crate::spaces::{MetricObject, SpaceAdapter};
use crate::weights::{Panel, WeightVector};

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualEstimate {
    pub period: usize,
    /// Weighted combination of control outcomes.
    pub raw: HilbertElement,
    /// `raw` projected onto the image of the embedding.
    pub projected: HilbertElement,
    pub object: MetricObject,
    pub weights_used: WeightVector,
}

/// Counterfactual for the treated unit at post-treatment period `t`.
pub fn predict(
    panel: &Panel,
    weights: &WeightVector,
    adapter: &SpaceAdapter,
    t: usize,
) -> Result<CounterfactualEstimate> {
    if t < panel.t0() || t >= panel.n_periods() {
        return Err(Error::InvalidInput(format!(
            "period {t} is not post-treatment (T0={}, T={})",
            panel.t0(),
            panel.n_periods()
        )));
    }
    if weights.len() != panel.n_controls() {
        return Err(Error::Dimension(
            "weight length differs from control count".into(),
        ));
    }
    let controls: Vec<&HilbertElement> =
        (1..panel.n_units()).map(|i| panel.outcome(i, t)).collect();
    let raw = lincomb(weights.as_slice(), &controls)?;
    let projected = adapter.project(&raw)?;
    let object = adapter.inverse(&projected)?;
    Ok(CounterfactualEstimate {
        period: t,
        raw,
        projected,
        object,
        weights_used: weights.clone(),
    })
}

/// Predictions for every post-treatment period with one weight vector.
pub fn predict_all(
    panel: &Panel,
    weights: &WeightVector,
    adapter: &SpaceAdapter,
) -> Result<Vec<CounterfactualEstimate>> {
    (panel.t0()..panel.n_periods())
        .map(|t| predict(panel, weights, adapter, t))
        .collect()
}

/// Endpoints of the geodesic from the counterfactual to the observed outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicEffect {
    pub counterfactual: HilbertElement,
    pub observed: HilbertElement,
}

impl GeodesicEffect {
    /// Point at fraction `s` of the way from counterfactual to observation.
    pub fn sample(&self, adapter: &SpaceAdapter, s: f64) -> Result<MetricObject> {
        adapter.geodesic_embedded(&self.counterfactual, &self.observed, s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodEffect {
    pub period: usize,
    /// `Y_0t - Yhat_0t` in the Hilbert space.
    pub difference: HilbertElement,
    /// Geodesic length `d_t`.
    pub magnitude: f64,
    pub geodesic: GeodesicEffect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectSeries {
    pub periods: Vec<PeriodEffect>,
}

impl EffectSeries {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.magnitude).collect()
    }
}

pub fn effects(
    panel: &Panel,
    estimates: &[CounterfactualEstimate],
    adapter: &SpaceAdapter,
) -> Result<EffectSeries> {
    let periods = estimates
        .iter()
        .map(|e| {
            let observed = panel.outcome(0, e.period).clone();
            let difference = observed.sub(&e.projected)?;
            // checks the observation is a valid point of the space
            adapter.inverse(&observed)?;
            Ok(PeriodEffect {
                period: e.period,
                magnitude: norm(&difference),
                difference,
                geodesic: GeodesicEffect {
                    counterfactual: e.projected.clone(),
                    observed,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectSeries { periods })
}
