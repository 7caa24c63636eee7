//! Subcommand implementations.

use std::path::Path;

use fsc_core::estimator::{effects, predict_all};
use fsc_core::inference::{conformal_band, placebo_test};
use fsc_core::simulate::{run_monte_carlo, ArConfig, Dgp, FactorConfig, McConfig, McEstimator};
use fsc_core::weights::{
    basis_for, center_and_expand, cv_lambda, default_lambda_grid, diagnostics, fit, EstimatorKind,
    Fit, FitConfig, LambdaPolicy, Panel, WeightKind, WeightVector,
};
use fsc_core::{Execution, SpaceAdapter};

use crate::args::{
    resolve, Cli, Command, Common, DgpArg, EstimatorArg, PlaceboArgs, RunConfig, Settings,
    ShapeArg, SimArgs,
};
use crate::error::{AtStage, CliError, CliResult, Stage};
use crate::output::{
    self, BandRow, CvRecord, CvRow, DiagnosticsFile, EffectRecord, EstimateRow, McBoundRow,
    McRepRow, McRow, PlaceboFile, PlaceboPeriod, UnitResidual, UnitWeight, WeightsFile,
};
use crate::panel_io::{self, PanelData};
use crate::space::{object_coords, GridSpec, SpaceSpec};

struct Context {
    data: PanelData,
    panel: Panel,
    adapter: SpaceAdapter,
}

fn load_context(common: &Common, settings: &Settings) -> CliResult<Context> {
    let path = common.panel.as_ref().ok_or_else(|| {
        CliError::validation(Stage::Args, "--panel is required for this subcommand")
    })?;
    let mut data = panel_io::load(path, None)?;
    if let Some(space) = settings.space {
        data.space = space;
    }
    let (panel, adapter) = data.build()?;
    Ok(Context {
        data,
        panel,
        adapter,
    })
}

fn execution(settings: &Settings) -> CliResult<Execution> {
    match settings.threads {
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            #[cfg(feature = "parallel")]
            {
                // a second call in the same process keeps the first pool
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            #[cfg(not(feature = "parallel"))]
            let _ = n;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

fn fit_config(settings: &Settings, estimator: EstimatorArg) -> FitConfig {
    FitConfig {
        estimator: match estimator {
            EstimatorArg::Fsc => EstimatorKind::Fsc,
            EstimatorArg::Afsc => EstimatorKind::Afsc,
        },
        lambda: match settings.lambda {
            Some(l) => LambdaPolicy::Fixed(l),
            None => LambdaPolicy::Cv(settings.lambda_grid.clone()),
        },
        basis: settings.basis.kind(),
        k: settings.k,
        use_covariates: settings.use_covariates,
        covariate_weight: settings.covariate_weight,
    }
}

fn stage_for(estimator: EstimatorArg) -> Stage {
    match estimator {
        EstimatorArg::Fsc => Stage::Fit,
        EstimatorArg::Afsc => Stage::Augment,
    }
}

fn estimator_name(e: EstimatorArg) -> &'static str {
    match e {
        EstimatorArg::Fsc => "fsc",
        EstimatorArg::Afsc => "afsc",
    }
}

fn run_fit(
    ctx: &Context,
    settings: &Settings,
    estimator: EstimatorArg,
    exec: Execution,
) -> CliResult<Fit> {
    fit(&ctx.panel, &fit_config(settings, estimator), exec).at(stage_for(estimator))
}

fn unit_weights(ctx: &Context, w: &WeightVector) -> Vec<UnitWeight> {
    ctx.data.unit_ids[1..]
        .iter()
        .zip(w.as_slice())
        .map(|(id, v)| UnitWeight {
            unit_id: id.clone(),
            weight: *v,
        })
        .collect()
}

fn weights_file(ctx: &Context, f: &Fit, estimator: EstimatorArg) -> WeightsFile {
    WeightsFile {
        estimator: estimator_name(estimator).into(),
        kind: match f.weights.kind {
            WeightKind::Simplex => "simplex".into(),
            WeightKind::SumToOne => "sum_to_one".into(),
        },
        lambda: f.lambda,
        treated: ctx.data.treated().to_string(),
        weights: unit_weights(ctx, &f.weights),
        fsc_weights: unit_weights(ctx, &f.scm),
    }
}

/// Writes weights.json, diagnostics.json and estimates.csv.
fn write_fit(
    ctx: &Context,
    settings: &Settings,
    f: &Fit,
    estimator: EstimatorArg,
    out: &Path,
) -> CliResult<()> {
    let stage = stage_for(estimator);
    let basis = basis_for(&ctx.panel, settings.basis.kind(), settings.k).at(stage)?;
    let diag = diagnostics(&ctx.panel, &f.weights, &basis).at(stage)?;
    let estimates = predict_all(&ctx.panel, &f.weights, &ctx.adapter).at(Stage::Project)?;
    let fx = effects(&ctx.panel, &estimates, &ctx.adapter).at(Stage::Project)?;
    let mut rows = Vec::new();
    for e in &estimates {
        let native = object_coords(&e.object);
        let observed = ctx.panel.outcome(0, e.period).values();
        for j in 0..native.len() {
            rows.push(EstimateRow {
                period: e.period + 1,
                coord_index: j,
                observed: ctx.data.coords[0][e.period][j],
                counterfactual: native[j],
                observed_embedded: observed[j],
                counterfactual_embedded: e.projected.values()[j],
                counterfactual_raw: e.raw.values()[j],
            });
        }
    }
    let diag_file = DiagnosticsFile {
        estimator: estimator_name(estimator).into(),
        space: ctx.data.space.to_string(),
        basis: settings.basis.name().into(),
        k: basis.k(),
        n_units: ctx.panel.n_units(),
        n_periods: ctx.panel.n_periods(),
        t0: ctx.panel.t0(),
        lambda: f.lambda,
        prefit: diag.prefit,
        fsc_prefit: ctx.panel.pre_objective(f.scm.as_slice()).sqrt(),
        l1_norm: diag.l1_norm,
        l2_norm: diag.l2_norm,
        covariate_imbalance: diag.covariate_imbalance,
        singular_values: diag.singular_values,
        cv: f.cv.as_ref().map(|c| CvRecord {
            lambdas: c.lambdas.clone(),
            scores: c.scores.clone(),
            best_lambda: c.best_lambda,
        }),
        effects: fx
            .periods
            .iter()
            .map(|p| EffectRecord {
                period: p.period + 1,
                magnitude: p.magnitude,
            })
            .collect(),
    };
    output::write_json(out, output::WEIGHTS, &weights_file(ctx, f, estimator))?;
    output::write_json(out, output::DIAGNOSTICS, &diag_file)?;
    output::write_table(out, output::ESTIMATES, &rows)
}

fn cmd_fit(common: &Common, settings: &Settings, estimator: EstimatorArg) -> CliResult<String> {
    let exec = execution(settings)?;
    let ctx = load_context(common, settings)?;
    let f = run_fit(&ctx, settings, estimator, exec)?;
    write_fit(&ctx, settings, &f, estimator, &common.out_dir)?;
    let mut msg = format!(
        "{}: prefit {:.6} with {} donors",
        estimator_name(estimator),
        ctx.panel.pre_objective(f.weights.as_slice()).sqrt(),
        ctx.panel.n_controls()
    );
    if let Some(l) = f.lambda {
        msg += &format!(", lambda {l:.6e}");
    }
    Ok(msg)
}

fn cmd_band(common: &Common, settings: &Settings) -> CliResult<String> {
    let exec = execution(settings)?;
    let ctx = load_context(common, settings)?;
    let t0 = ctx.panel.t0();
    let floor = 1.0 / (t0 as f64 + 1.0);
    if settings.alpha <= floor {
        return Err(CliError::validation(
            Stage::Args,
            format!(
                "alpha must exceed 1/(T0+1) = {floor} for T0={t0}, got {}",
                settings.alpha
            ),
        ));
    }
    let f = run_fit(&ctx, settings, settings.estimator, exec)?;
    write_fit(&ctx, settings, &f, settings.estimator, &common.out_dir)?;
    let mut rows = Vec::new();
    for t in t0..ctx.panel.n_periods() {
        let b = conformal_band(&ctx.panel, &f.weights, t, settings.alpha).at(Stage::Infer)?;
        for j in 0..b.center.len() {
            rows.push(BandRow {
                period: t + 1,
                coord_index: j,
                alpha: b.alpha,
                center: b.center[j],
                lower: b.lower[j],
                upper: b.upper[j],
                radius: b.radius[j],
            });
        }
    }
    output::write_table(&common.out_dir, output::BANDS, &rows)?;
    Ok(format!(
        "bands at alpha={} for {} post-treatment period(s)",
        settings.alpha,
        ctx.panel.n_periods() - t0
    ))
}

fn cmd_placebo(common: &Common, settings: &Settings, args: &PlaceboArgs) -> CliResult<String> {
    let exec = execution(settings)?;
    let ctx = load_context(common, settings)?;
    let mut cfg = fit_config(settings, settings.estimator);
    let f = run_fit(&ctx, settings, settings.estimator, exec)?;
    if let (true, Some(l)) = (args.reuse_lambda, f.lambda) {
        cfg.lambda = LambdaPolicy::Fixed(l);
    }
    output::write_json(
        &common.out_dir,
        output::WEIGHTS,
        &weights_file(&ctx, &f, settings.estimator),
    )?;
    let mut periods = Vec::new();
    for t in ctx.panel.t0()..ctx.panel.n_periods() {
        let r = placebo_test(&ctx.panel, &cfg, t, exec).at(Stage::Infer)?;
        periods.push(PlaceboPeriod {
            period: t + 1,
            p_value: r.p_value,
            residuals: ctx
                .data
                .unit_ids
                .iter()
                .zip(&r.residuals)
                .map(|(id, v)| UnitResidual {
                    unit_id: id.clone(),
                    residual: *v,
                })
                .collect(),
        });
    }
    let summary = periods
        .iter()
        .map(|p| format!("period {}: p={:.4}", p.period, p.p_value))
        .collect::<Vec<_>>()
        .join(", ");
    output::write_json(
        &common.out_dir,
        output::PLACEBO,
        &PlaceboFile {
            estimator: estimator_name(settings.estimator).into(),
            treated: ctx.data.treated().to_string(),
            periods,
        },
    )?;
    Ok(summary)
}

fn cmd_cv(common: &Common, settings: &Settings) -> CliResult<String> {
    let exec = execution(settings)?;
    let ctx = load_context(common, settings)?;
    let basis = basis_for(&ctx.panel, settings.basis.kind(), settings.k).at(Stage::Augment)?;
    let grid = match &settings.lambda_grid {
        Some(g) => g.clone(),
        None => default_lambda_grid(&center_and_expand(&ctx.panel, &basis).at(Stage::Augment)?),
    };
    let curve =
        cv_lambda(&ctx.panel, &basis, &grid, settings.use_covariates, exec).at(Stage::Augment)?;
    let rows: Vec<CvRow> = curve
        .lambdas
        .iter()
        .zip(&curve.scores)
        .map(|(l, s)| CvRow {
            lambda: *l,
            score: *s,
        })
        .collect();
    output::write_table(&common.out_dir, output::CV, &rows)?;
    Ok(format!("best lambda {:.6e}", curve.best_lambda))
}

fn cmd_simulate(
    common: &Common,
    settings: &Settings,
    sim: &SimArgs,
    cfg: &RunConfig,
) -> CliResult<String> {
    let exec = execution(settings)?;
    let dgp_arg = sim.dgp.or(cfg.dgp).unwrap_or(DgpArg::Ar);
    let reps = sim.reps.or(cfg.reps).unwrap_or(50);
    let deltas = sim
        .deltas
        .clone()
        .or_else(|| cfg.deltas.clone())
        .unwrap_or_default();
    let noise = sim.noise.or(cfg.noise);
    if let Some(c) = noise {
        if !(c.is_finite() && c >= 0.0) {
            return Err(CliError::validation(
                Stage::Args,
                format!("noise must be non-negative, got {c}"),
            ));
        }
    }
    if reps == 0 {
        return Err(CliError::validation(Stage::Args, "reps must be at least 1"));
    }
    let dgp = match dgp_arg {
        DgpArg::Ar => {
            let base = ArConfig::default();
            Dgp::Autoregressive(ArConfig {
                noise: noise.unwrap_or(base.noise),
                seed: settings.seed.unwrap_or(base.seed),
                ..base
            })
        }
        DgpArg::Factor => {
            let base = FactorConfig::default();
            Dgp::Factor(FactorConfig {
                noise: noise.unwrap_or(base.noise),
                shape: sim
                    .factor_shape
                    .or(cfg.factor_shape)
                    .unwrap_or(ShapeArg::Cosine)
                    .shape(),
                seed: settings.seed.unwrap_or(base.seed),
                ..base
            })
        }
    };
    let mc = McConfig {
        reps,
        estimators: McEstimator::standard_set(),
        basis: settings.basis.kind(),
        k: settings.k,
        lambda_grid: settings.lambda_grid.clone(),
        deltas,
    };
    let res = run_monte_carlo(&dgp, &mc, exec).at(Stage::Simulate)?;
    let out = &common.out_dir;
    let table: Vec<McRow> = res
        .summaries
        .iter()
        .map(|s| McRow {
            estimator: s.estimator.clone(),
            reps,
            failures: s.failures,
            median: s.median,
            q1: s.q1,
            q3: s.q3,
        })
        .collect();
    let mut per_rep = Vec::new();
    for rep in 0..reps {
        for s in &res.summaries {
            per_rep.push(McRepRow {
                rep,
                estimator: s.estimator.clone(),
                error: s.errors[rep],
                lambda_cv: res.lambda_cv[rep],
            });
        }
    }
    output::write_table(out, output::MC_TABLE, &table)?;
    output::write_table(out, output::MC_REPS, &per_rep)?;
    if !mc.deltas.is_empty() {
        let bounds: Vec<McBoundRow> = res
            .bounds
            .iter()
            .map(|b| McBoundRow {
                rep: b.rep,
                estimator: b.estimator.clone(),
                delta: b.report.delta,
                realized: b.report.realized,
                bound: b.report.rhs,
                violated: b.report.violated,
            })
            .collect();
        output::write_table(out, output::MC_BOUNDS, &bounds)?;
    }
    if let Some(path) = &sim.save_panel {
        let s = dgp.generate(0).at(Stage::Simulate)?;
        let n = s.panel.n_units();
        let data = PanelData {
            space: SpaceSpec::L2,
            grid: GridSpec {
                size: dgp.grid_size(),
                domain: None,
            },
            t0: s.panel.t0(),
            unit_ids: (0..n).map(|i| format!("unit-{i}")).collect(),
            coords: (0..n)
                .map(|i| {
                    s.panel
                        .unit(i)
                        .iter()
                        .map(|y| y.values().to_vec())
                        .collect()
                })
                .collect(),
            covariate_names: Vec::new(),
            covariates: None,
        };
        panel_io::save(path, &data, None)?;
    }
    if !res.rep_errors.is_empty() {
        eprintln!(
            "{} replication(s) failed; see {}",
            res.rep_errors.len(),
            output::MC_REPS
        );
    }
    Ok(table
        .iter()
        .map(|r| format!("{}: median {:.6}", r.estimator, r.median))
        .collect::<Vec<_>>()
        .join(", "))
}

/// Runs one invocation and returns a one-line summary for stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let settings = resolve(&cli.common, &cfg)?;
    let c = &cli.common;
    match &cli.command {
        Command::Fit => cmd_fit(c, &settings, EstimatorArg::Fsc),
        Command::Augment => cmd_fit(c, &settings, EstimatorArg::Afsc),
        Command::Band => cmd_band(c, &settings),
        Command::Placebo(p) => cmd_placebo(c, &settings, p),
        Command::Cv => cmd_cv(c, &settings),
        Command::Simulate(sim) => cmd_simulate(c, &settings, sim, &cfg),
    }
}
