//! Result files. Every file can be read back and re-emitted byte for byte.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::canonical::{fmt_f64, to_csv, to_json};
use crate::error::{CliError, CliResult, Stage};

pub const WEIGHTS: &str = "weights.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const ESTIMATES: &str = "estimates.csv";
pub const BANDS: &str = "bands.csv";
pub const PLACEBO: &str = "placebo.json";
pub const MC_TABLE: &str = "mc_table.csv";
pub const MC_REPS: &str = "mc_reps.csv";
pub const MC_BOUNDS: &str = "mc_bounds.csv";
pub const CV: &str = "cv.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitWeight {
    pub unit_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub estimator: String,
    /// `simplex` or `sum_to_one`.
    pub kind: String,
    pub lambda: Option<f64>,
    pub treated: String,
    pub weights: Vec<UnitWeight>,
    /// The plain FSC weights the estimate started from.
    pub fsc_weights: Vec<UnitWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub lambdas: Vec<f64>,
    pub scores: Vec<f64>,
    pub best_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub period: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub estimator: String,
    pub space: String,
    pub basis: String,
    pub k: usize,
    pub n_units: usize,
    pub n_periods: usize,
    pub t0: usize,
    pub lambda: Option<f64>,
    pub prefit: f64,
    pub fsc_prefit: f64,
    pub l1_norm: f64,
    pub l2_norm: f64,
    pub covariate_imbalance: Option<f64>,
    pub singular_values: Vec<f64>,
    pub cv: Option<CvRecord>,
    pub effects: Vec<EffectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResidual {
    pub unit_id: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboPeriod {
    pub period: usize,
    pub p_value: f64,
    pub residuals: Vec<UnitResidual>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboFile {
    pub estimator: String,
    pub treated: String,
    pub periods: Vec<PlaceboPeriod>,
}

/// A CSV table with canonical cell formatting.
pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];
    fn cells(&self) -> Vec<String>;
    fn parse(cells: &[&str]) -> Result<Self, String>;
}

fn num(s: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("'{s}' is not a number"))
}

fn count(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("'{s}' is not a count"))
}

fn opt_num(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}

/// One row per (post period, coordinate). `observed` and `counterfactual`
/// are native coordinates; the `_embedded` columns live in the Hilbert
/// space, where `counterfactual_raw` is the unprojected weighted combination.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub period: usize,
    pub coord_index: usize,
    pub observed: f64,
    pub counterfactual: f64,
    pub observed_embedded: f64,
    pub counterfactual_embedded: f64,
    pub counterfactual_raw: f64,
}

impl CsvRow for EstimateRow {
    const HEADER: &'static [&'static str] = &[
        "period",
        "coord_index",
        "observed",
        "counterfactual",
        "observed_embedded",
        "counterfactual_embedded",
        "counterfactual_raw",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.period.to_string(),
            self.coord_index.to_string(),
            fmt_f64(self.observed),
            fmt_f64(self.counterfactual),
            fmt_f64(self.observed_embedded),
            fmt_f64(self.counterfactual_embedded),
            fmt_f64(self.counterfactual_raw),
        ]
    }

    fn parse(c: &[&str]) -> Result<Self, String> {
        Ok(Self {
            period: count(c[0])?,
            coord_index: count(c[1])?,
            observed: num(c[2])?,
            counterfactual: num(c[3])?,
            observed_embedded: num(c[4])?,
            counterfactual_embedded: num(c[5])?,
            counterfactual_raw: num(c[6])?,
        })
    }
}

/// Pointwise conformal band in embedded coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub period: usize,
    pub coord_index: usize,
    pub alpha: f64,
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    pub radius: f64,
}

impl CsvRow for BandRow {
    const HEADER: &'static [&'static str] = &[
        "period",
        "coord_index",
        "alpha",
        "center",
        "lower",
        "upper",
        "radius",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.period.to_string(),
            self.coord_index.to_string(),
            fmt_f64(self.alpha),
            fmt_f64(self.center),
            fmt_f64(self.lower),
            fmt_f64(self.upper),
            fmt_f64(self.radius),
        ]
    }

    fn parse(c: &[&str]) -> Result<Self, String> {
        Ok(Self {
            period: count(c[0])?,
            coord_index: count(c[1])?,
            alpha: num(c[2])?,
            center: num(c[3])?,
            lower: num(c[4])?,
            upper: num(c[5])?,
            radius: num(c[6])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub estimator: String,
    pub reps: usize,
    pub failures: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl CsvRow for McRow {
    const HEADER: &'static [&'static str] =
        &["estimator", "reps", "failures", "median", "q1", "q3"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.estimator.clone(),
            self.reps.to_string(),
            self.failures.to_string(),
            fmt_f64(self.median),
            fmt_f64(self.q1),
            fmt_f64(self.q3),
        ]
    }

    fn parse(c: &[&str]) -> Result<Self, String> {
        Ok(Self {
            estimator: c[0].to_string(),
            reps: count(c[1])?,
            failures: count(c[2])?,
            median: num(c[3])?,
            q1: num(c[4])?,
            q3: num(c[5])?,
        })
    }
}

/// Per-replication error; empty when the replication failed.
#[derive(Debug, Clone, PartialEq)]
pub struct McRepRow {
    pub rep: usize,
    pub estimator: String,
    pub error: Option<f64>,
    pub lambda_cv: Option<f64>,
}

impl CsvRow for McRepRow {
    const HEADER: &'static [&'static str] = &["rep", "estimator", "error", "lambda_cv"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.rep.to_string(),
            self.estimator.clone(),
            self.error.map(fmt_f64).unwrap_or_default(),
            self.lambda_cv.map(fmt_f64).unwrap_or_default(),
        ]
    }

    fn parse(c: &[&str]) -> Result<Self, String> {
        Ok(Self {
            rep: count(c[0])?,
            estimator: c[1].to_string(),
            error: opt_num(c[2])?,
            lambda_cv: opt_num(c[3])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McBoundRow {
    pub rep: usize,
    pub estimator: String,
    pub delta: f64,
    pub realized: f64,
    pub bound: Option<f64>,
    pub violated: bool,
}

impl CsvRow for McBoundRow {
    const HEADER: &'static [&'static str] =
        &["rep", "estimator", "delta", "realized", "bound", "violated"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.rep.to_string(),
            self.estimator.clone(),
            fmt_f64(self.delta),
            fmt_f64(self.realized),
            self.bound.map(fmt_f64).unwrap_or_default(),
            self.violated.to_string(),
        ]
    }

    fn parse(c: &[&str]) -> Result<Self, String> {
        Ok(Self {
            rep: count(c[0])?,
            estimator: c[1].to_string(),
            delta: num(c[2])?,
            realized: num(c[3])?,
            bound: opt_num(c[4])?,
            violated: c[5]
                .parse()
                .map_err(|_| format!("'{}' is not a boolean", c[5]))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub lambda: f64,
    pub score: f64,
}

impl CsvRow for CvRow {
    const HEADER: &'static [&'static str] = &["lambda", "score"];

    fn cells(&self) -> Vec<String> {
        vec![fmt_f64(self.lambda), fmt_f64(self.score)]
    }

    fn parse(c: &[&str]) -> Result<Self, String> {
        Ok(Self {
            lambda: num(c[0])?,
            score: num(c[1])?,
        })
    }
}

pub fn table_to_string<R: CsvRow>(rows: &[R]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(CsvRow::cells).collect();
    to_csv(R::HEADER, &cells).expect("in-memory CSV")
}

pub fn table_from_str<R: CsvRow>(text: &str) -> Result<Vec<R>, String> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let head = rdr.headers().map_err(|e| e.to_string())?.clone();
    if head.iter().collect::<Vec<_>>() != R::HEADER {
        return Err(format!("expected columns {}", R::HEADER.join(",")));
    }
    rdr.records()
        .enumerate()
        .map(|(i, r)| {
            let r = r.map_err(|e| e.to_string())?;
            let cells: Vec<&str> = r.iter().collect();
            R::parse(&cells).map_err(|e| format!("row {}: {e}", i + 2))
        })
        .collect()
}

fn write_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::validation(
        Stage::Write,
        format!("cannot write {}: {e}", path.display()),
    )
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| write_error(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| write_error(&path, e))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let text = to_json(value).map_err(|e| write_error(&dir.join(name), e))?;
    write_text(dir, name, &text)
}

pub fn write_table<R: CsvRow>(dir: &Path, name: &str, rows: &[R]) -> CliResult<()> {
    write_text(dir, name, &table_to_string(rows))
}

fn read_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::validation(Stage::Load, format!("{}: {e}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| read_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| read_error(path, e))
}

pub fn read_table<R: CsvRow>(path: &Path) -> CliResult<Vec<R>> {
    let text = std::fs::read_to_string(path).map_err(|e| read_error(path, e))?;
    table_from_str(&text).map_err(|e| read_error(path, e))
}

/// Reads every known result file in `src` and writes it again to `dst`.
/// Returns the names of the files copied.
pub fn reemit(src: &Path, dst: &Path) -> CliResult<Vec<&'static str>> {
    fn json<T: Serialize + DeserializeOwned>(src: &Path, dst: &Path, name: &str) -> CliResult<()> {
        let v: T = read_json(&src.join(name))?;
        write_json(dst, name, &v)
    }
    fn table<R: CsvRow>(src: &Path, dst: &Path, name: &str) -> CliResult<()> {
        let v: Vec<R> = read_table(&src.join(name))?;
        write_table(dst, name, &v)
    }
    let mut done = Vec::new();
    let steps: [(&'static str, fn(&Path, &Path, &str) -> CliResult<()>); 9] = [
        (WEIGHTS, json::<WeightsFile>),
        (DIAGNOSTICS, json::<DiagnosticsFile>),
        (PLACEBO, json::<PlaceboFile>),
        (ESTIMATES, table::<EstimateRow>),
        (BANDS, table::<BandRow>),
        (MC_TABLE, table::<McRow>),
        (MC_REPS, table::<McRepRow>),
        (MC_BOUNDS, table::<McBoundRow>),
        (CV, table::<CvRow>),
    ];
    for (name, step) in steps {
        if src.join(name).exists() {
            step(src, dst, name)?;
            done.push(name);
        }
    }
    Ok(done)
}
