//! Command-line arguments and the optional JSON run configuration.
//! Flags override the configuration file, which overrides the defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsc_core::simulate::FactorShape;
use fsc_core::BasisKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Stage};
use crate::space::SpaceSpec;

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_K: usize = 50;

#[derive(Debug, Parser)]
#[command(
    name = "fsc",
    version,
    about = "Functional synthetic control for metric-space outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plain FSC weights on the simplex.
    Fit,
    /// Ridge-augmented FSC; lambda fixed by --lambda or chosen by CV.
    Augment,
    /// Conformal prediction bands for every post-treatment period.
    Band,
    /// Placebo permutation test for every post-treatment period.
    Placebo(PlaceboArgs),
    /// Monte Carlo comparison of the estimators on a simulated design.
    Simulate(SimArgs),
    /// Leave-one-period-out CV curve for lambda.
    Cv,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PlaceboArgs {
    /// Reuse the treated unit's CV-selected lambda for every placebo refit
    /// instead of re-selecting it per unit.
    #[arg(long = "reuse-lambda")]
    pub reuse_lambda: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisArg {
    Bspline,
    Fourier,
    Standard,
}

impl BasisArg {
    pub fn kind(self) -> BasisKind {
        match self {
            BasisArg::Bspline => BasisKind::BsplineCubic,
            BasisArg::Fourier => BasisKind::Fourier,
            BasisArg::Standard => BasisKind::Standard,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisArg::Bspline => "bspline",
            BasisArg::Fourier => "fourier",
            BasisArg::Standard => "standard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorArg {
    Fsc,
    Afsc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpArg {
    Ar,
    Factor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeArg {
    Cosine,
    Separable,
}

impl ShapeArg {
    pub fn shape(self) -> FactorShape {
        match self {
            ShapeArg::Cosine => FactorShape::Cosine,
            ShapeArg::Separable => FactorShape::Separable,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Panel file (.csv long format or .json).
    #[arg(long, global = true)]
    pub panel: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long = "out-dir", global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Comma-separated CV grid.
    #[arg(
        long = "lambda-grid",
        global = true,
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, global = true, value_enum)]
    pub basis: Option<BasisArg>,
    #[arg(long = "K", global = true)]
    pub k: Option<usize>,
    /// Overrides the panel header: l2, wasserstein, spd-frobenius,
    /// spd-power:p, spd-logeuclidean, laplacian:W, composition.
    #[arg(long, global = true)]
    pub space: Option<String>,
    /// Estimator used by band and placebo.
    #[arg(long, global = true, value_enum)]
    pub estimator: Option<EstimatorArg>,
    /// Use the panel's covariates (exact balance for AFSC).
    #[arg(long = "use-covariates", global = true)]
    pub use_covariates: bool,
    /// Structured JSON errors on stderr.
    #[arg(long = "json-errors", global = true)]
    pub json_errors: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long, value_enum)]
    pub dgp: Option<DgpArg>,
    /// Noise half-width C.
    #[arg(long, allow_negative_numbers = true)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long = "factor-shape", value_enum)]
    pub factor_shape: Option<ShapeArg>,
    /// Comma-separated deltas for the error-bound check.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub deltas: Option<Vec<f64>>,
    /// Also write replication 0's panel to this file.
    #[arg(long = "save-panel")]
    pub save_panel: Option<PathBuf>,
}

/// Contents of `--config`; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub estimator: Option<EstimatorArg>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub basis: Option<BasisArg>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub space: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub use_covariates: Option<bool>,
    pub covariate_weight: Option<f64>,
    pub dgp: Option<DgpArg>,
    pub noise: Option<f64>,
    pub reps: Option<usize>,
    pub factor_shape: Option<ShapeArg>,
    pub deltas: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(
                Stage::Args,
                format!("cannot read config {}: {e}", path.display()),
            )
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::validation(Stage::Args, format!("config {}: {e}", path.display()))
        })
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub estimator: EstimatorArg,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub basis: BasisArg,
    pub k: usize,
    pub alpha: f64,
    pub space: Option<SpaceSpec>,
    /// `None` keeps the simulation design's own default seed.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub use_covariates: bool,
    pub covariate_weight: f64,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::validation(Stage::Args, msg)
}

pub fn resolve(common: &Common, cfg: &RunConfig) -> CliResult<Settings> {
    let s = Settings {
        estimator: common
            .estimator
            .or(cfg.estimator)
            .unwrap_or(EstimatorArg::Afsc),
        lambda: common.lambda.or(cfg.lambda),
        lambda_grid: common
            .lambda_grid
            .clone()
            .or_else(|| cfg.lambda_grid.clone()),
        basis: common.basis.or(cfg.basis).unwrap_or(BasisArg::Bspline),
        k: common.k.or(cfg.k).unwrap_or(DEFAULT_K),
        alpha: common.alpha.or(cfg.alpha).unwrap_or(DEFAULT_ALPHA),
        space: common
            .space
            .clone()
            .or_else(|| cfg.space.clone())
            .map(|s| s.parse::<SpaceSpec>())
            .transpose()
            .map_err(bad)?,
        seed: common.seed.or(cfg.seed),
        threads: common.threads.or(cfg.threads),
        use_covariates: common.use_covariates || cfg.use_covariates.unwrap_or(false),
        covariate_weight: cfg.covariate_weight.unwrap_or(1.0),
    };
    if s.k == 0 {
        return Err(bad("K must be at least 1"));
    }
    if let Some(l) = s.lambda {
        if !(l.is_finite() && l > 0.0) {
            return Err(bad(format!("lambda must be positive, got {l}")));
        }
    }
    if let Some(g) = &s.lambda_grid {
        if g.is_empty() || g.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(bad("lambda grid values must be positive"));
        }
    }
    if !(s.alpha > 0.0 && s.alpha < 1.0) {
        return Err(bad(format!("alpha must lie in (0, 1), got {}", s.alpha)));
    }
    if s.threads == Some(0) {
        return Err(bad("threads must be at least 1"));
    }
    if !(s.covariate_weight.is_finite() && s.covariate_weight >= 0.0) {
        return Err(bad("covariate_weight must be non-negative"));
    }
    Ok(s)
}
