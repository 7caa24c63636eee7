//! Parsing of `--space` values and grid specs, and conversion between flat
//! coordinate records and metric objects.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use fsc_core::spaces::{flatten, unflatten};
use fsc_core::{Grid, MetricObject, SpaceAdapter, SpaceKind, SpdMetric};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpaceSpec {
    L2,
    Wasserstein,
    SpdFrobenius,
    SpdPower(f64),
    SpdLogEuclidean,
    /// Off-diagonal weights bounded by `W`.
    Laplacian(f64),
    Composition,
}

impl FromStr for SpaceSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |what: &str| -> Result<f64, String> {
            let a =
                arg.ok_or_else(|| format!("space '{name}' needs a parameter, e.g. {name}:{what}"))?;
            let v: f64 = a
                .parse()
                .map_err(|_| format!("space parameter '{a}' is not a number"))?;
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(format!("space parameter must be positive, got {a}"))
            }
        };
        let plain = |spec: SpaceSpec| match arg {
            None => Ok(spec),
            Some(a) => Err(format!("space '{name}' takes no parameter (got '{a}')")),
        };
        match name {
            "l2" => plain(SpaceSpec::L2),
            "wasserstein" => plain(SpaceSpec::Wasserstein),
            "spd-frobenius" => plain(SpaceSpec::SpdFrobenius),
            "spd-power" => Ok(SpaceSpec::SpdPower(number("0.5")?)),
            "spd-logeuclidean" => plain(SpaceSpec::SpdLogEuclidean),
            "laplacian" => Ok(SpaceSpec::Laplacian(number("1")?)),
            "composition" => plain(SpaceSpec::Composition),
            _ => Err(format!(
                "unknown space '{s}' (expected l2, wasserstein, spd-frobenius, spd-power:p, \
                 spd-logeuclidean, laplacian:W or composition)"
            )),
        }
    }
}

impl fmt::Display for SpaceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceSpec::L2 => f.write_str("l2"),
            SpaceSpec::Wasserstein => f.write_str("wasserstein"),
            SpaceSpec::SpdFrobenius => f.write_str("spd-frobenius"),
            SpaceSpec::SpdPower(p) => write!(f, "spd-power:{p}"),
            SpaceSpec::SpdLogEuclidean => f.write_str("spd-logeuclidean"),
            SpaceSpec::Laplacian(w) => write!(f, "laplacian:{w}"),
            SpaceSpec::Composition => f.write_str("composition"),
        }
    }
}

/// `size` is the number of grid points for functions and quantiles, the
/// matrix order for SPD and Laplacian spaces, and the part count for
/// compositions. A domain is only meaningful for `l2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub size: usize,
    pub domain: Option<(f64, f64)>,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let bad = || format!("grid spec '{s}' must be '<size>' or '<size> <a> <b>'");
        let size: usize = parts.first().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if size == 0 {
            return Err("grid size must be positive".into());
        }
        let domain = match parts.len() {
            1 => None,
            3 => {
                let a: f64 = parts[1].parse().map_err(|_| bad())?;
                let b: f64 = parts[2].parse().map_err(|_| bad())?;
                Some((a, b))
            }
            _ => return Err(bad()),
        };
        Ok(Self { size, domain })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.domain {
            None => write!(f, "{}", self.size),
            Some((a, b)) => write!(f, "{} {a} {b}", self.size),
        }
    }
}

pub fn build_adapter(space: SpaceSpec, grid: GridSpec) -> fsc_core::Result<SpaceAdapter> {
    if grid.domain.is_some() && space != SpaceSpec::L2 {
        return Err(fsc_core::Error::InvalidInput(format!(
            "a grid domain is only allowed for l2, not {space}"
        )));
    }
    let n = grid.size;
    match space {
        SpaceSpec::L2 => {
            let (a, b) = grid.domain.unwrap_or((0.0, 1.0));
            Ok(SpaceAdapter::l2(Arc::new(Grid::uniform(n, a, b)?)))
        }
        SpaceSpec::Wasserstein => SpaceAdapter::wasserstein(n),
        SpaceSpec::SpdFrobenius => SpaceAdapter::spd(n, SpdMetric::Frobenius),
        SpaceSpec::SpdPower(p) => SpaceAdapter::spd(n, SpdMetric::Power(p)),
        SpaceSpec::SpdLogEuclidean => SpaceAdapter::spd(n, SpdMetric::LogEuclidean),
        SpaceSpec::Laplacian(w) => SpaceAdapter::laplacian(n, w),
        SpaceSpec::Composition => SpaceAdapter::composition(n),
    }
}

/// Number of coordinates per record group.
pub fn coordinate_count(adapter: &SpaceAdapter) -> usize {
    adapter.grid().len()
}

/// Wraps native coordinates (row-major for matrices) as an object of the
/// adapter's space. No validation.
pub fn object_from(adapter: &SpaceAdapter, coords: Vec<f64>) -> MetricObject {
    match adapter.kind() {
        SpaceKind::L2 => MetricObject::Function(coords),
        SpaceKind::Wasserstein { .. } => MetricObject::Distribution(coords),
        SpaceKind::Spd { m, .. } => MetricObject::SpdMatrix(unflatten(&coords, m)),
        SpaceKind::Laplacian { m, .. } => MetricObject::GraphLaplacian(unflatten(&coords, m)),
        SpaceKind::Composition { .. } => MetricObject::Composition(coords),
    }
}

pub fn object_coords(obj: &MetricObject) -> Vec<f64> {
    match obj {
        MetricObject::Function(v)
        | MetricObject::Distribution(v)
        | MetricObject::Composition(v) => v.clone(),
        MetricObject::SpdMatrix(a) | MetricObject::GraphLaplacian(a) => flatten(a),
    }
}
