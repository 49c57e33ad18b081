use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;

use didimp_core::benchmark::{exact_table, run_table1, BenchReport, Column, DgpSpec, SimulatedDesign};
use didimp_core::design::{
    build_estimand, Estimability, EstimandSpec, EstimandWeights, TreatmentEffectModel,
};
use didimp_core::estimator::{FitResult, ImputationModel, JointModel};
use didimp_core::inference::{default_leads, unit_scores, PretestPlan, PretestResult, VarianceSpec};
use didimp_core::panel::{load_panel, LoadReport, Panel};
use didimp_core::par::Execution;
use didimp_core::weights::{
    detect_underidentification, static_ols_weights, DynamicSpec, ImpliedWeights, Underidentification,
};
use didimp_core::Error as CoreError;
use serde::Serialize;

use crate::config::{NamedEstimand, RunConfig};
use crate::report::*;
use crate::{CliError, Result};

pub struct Loaded {
    pub panel: Panel,
    pub load: LoadReport,
}

pub fn load(config: &RunConfig) -> Result<Loaded> {
    config.validate()?;
    let path = config
        .input
        .path
        .as_ref()
        .ok_or_else(|| CliError::Config("no input file: set --input".into()))?;
    let schema = config.schema()?;
    let file = File::open(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (panel, load) = load_panel(BufReader::new(file), &schema)?;
    Ok(Loaded { panel, load })
}

fn load_warnings(load: &LoadReport) -> Vec<Warning> {
    let mut out = Vec::new();
    if load.dropped_missing_outcome > 0 {
        out.push(Warning::new(
            "load.dropped_missing_outcome",
            format!(
                "{} rows without an outcome were skipped",
                load.dropped_missing_outcome
            ),
        ));
    }
    if !load.dropped_always_treated.is_empty() {
        out.push(Warning::new(
            "load.dropped_always_treated",
            format!(
                "dropped always-treated units: {}",
                load.dropped_always_treated.join(", ")
            ),
        ));
    }
    out
}

/// Fitted estimator for one estimand, before any output is produced.
struct Prepared {
    label: String,
    weights: EstimandWeights,
    v: ImpliedWeights,
    fit: FitResult,
    /// Weights the variance default is chosen from.
    variance_weights: EstimandWeights,
}

/// The untreated-model fit shared by all estimands.
struct Shared {
    model: ImputationModel,
    residuals: BTreeMap<usize, f64>,
    /// τ̂_it on every imputable treated observation.
    tau_all: BTreeMap<usize, f64>,
    y0_all: BTreeMap<usize, f64>,
    non_imputable: usize,
}

fn build_weights(panel: &Panel, estimands: &[NamedEstimand]) -> Result<Vec<EstimandWeights>> {
    estimands
        .iter()
        .map(|e| {
            let mut w = build_estimand(panel, &e.spec)?;
            w.label = e.label();
            Ok(w)
        })
        .collect()
}

/// Checks every estimand before fitting any of them, so that a
/// non-identified estimand fails before a single number is computed.
fn prepare(
    config: &RunConfig,
    panel: &Panel,
    estimands: &[NamedEstimand],
) -> Result<(Shared, Vec<Prepared>)> {
    let ws = build_weights(panel, estimands)?;
    let model = ImputationModel::new(panel, &config.outcome_model)?;
    let tem = &config.treatment_effect_model;
    let joint = if tem.is_unrestricted() {
        for w in &ws {
            if let Estimability::NotIdentified { certificate } = model.estimability(w)? {
                return Err(CoreError::NotIdentified { certificate }.into());
            }
        }
        None
    } else {
        Some(JointModel::new(panel, &config.outcome_model, tem)?)
    };

    let y = panel.outcomes();
    let of = model.fit_outcomes(&y)?;
    let residuals = model
        .untreated()
        .iter()
        .copied()
        .zip(of.residuals.iter().copied())
        .collect();
    let mut tau_all = BTreeMap::new();
    let mut y0_all = BTreeMap::new();
    let mut non_imputable = 0;
    for (&k, y0) in model.treated().iter().zip(&of.y0_hat) {
        match y0 {
            Some(f) => {
                tau_all.insert(k, y[k] - f);
                y0_all.insert(k, *f);
            }
            None => non_imputable += 1,
        }
    }
    let mut prepared = Vec::with_capacity(ws.len());
    for w in ws {
        let (fit, v, variance_weights) = match &joint {
            None => {
                let fit = model.fit(&y, &w)?;
                let v = model.implied_weights(&w)?;
                (fit, v, w.clone())
            }
            Some(jm) => (jm.fit(&y, &w)?, jm.implied_weights(&w), jm.adjusted_weights(&w)),
        };
        prepared.push(Prepared {
            label: w.label.clone(),
            v: ImpliedWeights::from_vector(panel, v),
            weights: w,
            fit,
            variance_weights,
        });
    }
    Ok((
        Shared {
            model,
            residuals,
            tau_all,
            y0_all,
            non_imputable,
        },
        prepared,
    ))
}

fn pretest_plan(config: &RunConfig, panel: &Panel) -> Result<PretestPlan> {
    let pc = config.pretest.clone().unwrap_or_default();
    let leads = match pc.leads {
        Some(k) => k,
        None => default_leads(panel)?,
    };
    let mut extra = Vec::new();
    for name in &pc.extra_columns {
        let j = panel.covariate_index(name)?;
        extra.push((
            name.clone(),
            panel.observations().iter().map(|o| o.covariates[j]).collect(),
        ));
    }
    Ok(PretestPlan::with_columns(
        panel,
        &config.outcome_model,
        leads,
        extra,
    )?)
}

pub fn run_pretest(config: &RunConfig, panel: &Panel) -> Result<PretestResult> {
    let mode = config.pretest.clone().unwrap_or_default().mode;
    Ok(pretest_plan(config, panel)?.run(&panel.outcomes(), mode)?)
}

/// One row of the per-observation effect file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRow {
    pub unit: String,
    pub time: i64,
    pub horizon: i64,
    pub y: f64,
    pub y0_hat: f64,
    pub tau_hat: f64,
}

pub fn estimate(config: &RunConfig, loaded: &Loaded) -> Result<(EstimateReport, Vec<TauRow>)> {
    let panel = &loaded.panel;
    let (shared, prepared) = prepare(config, panel, &config.estimands())?;
    let mut warnings = load_warnings(&loaded.load);
    let (rank, cols) = (shared.model.untreated_rank(), shared.model.design().ncols());
    if rank < cols {
        warnings.push(Warning::new(
            "design.rank_repair",
            format!("untreated design has rank {rank} of {cols} columns; minimum-norm solution used"),
        ));
    }
    if shared.non_imputable > 0 {
        warnings.push(Warning::new(
            "estimate.non_imputable_cells",
            format!(
                "{} treated observations have no identified counterfactual",
                shared.non_imputable
            ),
        ));
    }
    let mut estimates = Vec::new();
    for p in &prepared {
        let spec = config
            .variance
            .unwrap_or_else(|| VarianceSpec::default_for(panel, &p.variance_weights));
        let (se, taubar) = match unit_scores(panel, &p.v.v, &shared.residuals, &shared.tau_all, &spec) {
            Ok(s) => {
                for f in &s.flags {
                    let code = if f.starts_with("degenerate_denominator") {
                        "variance.degenerate_denominator"
                    } else {
                        "variance.taubar_not_minimizing"
                    };
                    warnings.push(Warning::new(code, format!("{}: {f}", p.label)));
                }
                (s.scores.iter().map(|x| x * x).sum::<f64>().sqrt(), s.taubar)
            }
            Err(e) => {
                warnings.push(Warning::new("variance.unavailable", format!("{}: {e}", p.label)));
                (f64::NAN, Vec::new())
            }
        };
        estimates.push(EstimateRow {
            label: p.label.clone(),
            estimate: p.fit.tau_w,
            se,
            n_h: p.v.n_h,
            n_support: p.weights.weights.values().filter(|&&x| x != 0.0).count(),
            taubar_mode: spec.taubar_mode,
            leave_out: spec.leave_out,
            taubar,
            theta: p.fit.theta.clone(),
        });
    }
    let pretest = match &config.pretest {
        None => None,
        Some(_) => match run_pretest(config, panel) {
            Ok(r) => Some(PretestSummary::from(&r)),
            Err(e) => {
                warnings.push(Warning::new("pretest.unavailable", e.to_string()));
                None
            }
        },
    };
    let part = panel.partition();
    let tau_rows = shared
        .tau_all
        .iter()
        .map(|(&k, &t)| {
            let o = panel.obs(k);
            TauRow {
                unit: panel.unit_key(o.unit).to_string(),
                time: o.time,
                horizon: panel.horizon_of(k).unwrap_or_default(),
                y: o.outcome,
                y0_hat: shared.y0_all[&k],
                tau_hat: t,
            }
        })
        .collect();
    Ok((
        EstimateReport {
            n: panel.len(),
            n_untreated: part.untreated.len(),
            n_treated: part.treated.len(),
            n_units: panel.n_units(),
            outcome_model: config.outcome_model.clone(),
            treatment_effect_model: config.treatment_effect_model.clone(),
            estimates,
            pretest,
            warnings,
        },
        tau_rows,
    ))
}

/// Implied weights of every estimand on every observation with non-zero weight.
pub fn weights(config: &RunConfig, panel: &Panel) -> Result<Vec<WeightRow>> {
    let (_, prepared) = prepare(config, panel, &config.estimands())?;
    let mut rows = Vec::new();
    for p in &prepared {
        for (k, &x) in p.v.v.iter().enumerate() {
            if x != 0.0 {
                let o = panel.obs(k);
                rows.push(WeightRow {
                    estimand: p.label.clone(),
                    unit: panel.unit_key(o.unit).to_string(),
                    time: o.time,
                    treated: panel.is_treated(k),
                    weight: x,
                });
            }
        }
    }
    Ok(rows)
}

pub fn diagnose_ols(panel: &Panel) -> Result<(OlsSummary, Vec<OlsWeightRow>)> {
    let r = static_ols_weights(panel)?;
    let rows: Vec<OlsWeightRow> = r
        .weights
        .iter()
        .map(|&(k, w)| {
            let o = panel.obs(k);
            OlsWeightRow {
                unit: panel.unit_key(o.unit).to_string(),
                time: o.time,
                horizon: panel.horizon_of(k).unwrap_or_default(),
                weight: w,
            }
        })
        .collect();
    let under = detect_underidentification(panel, &DynamicSpec::default())?;
    let mut warnings = Vec::new();
    if r.mass_negative < 0.0 {
        warnings.push(Warning::new(
            "ols.negative_weights",
            format!(
                "{:.1}% of treated observations get negative weight (total {:.4})",
                100.0 * r.share_negative,
                r.mass_negative
            ),
        ));
    }
    if let Underidentification::Deficient { dim, .. } = &under {
        warnings.push(Warning::new(
            "ols.underidentified",
            format!("fully dynamic specification has a {dim}-dimensional null space"),
        ));
    }
    let summary = OlsSummary {
        sum: r.sum,
        share_negative: r.share_negative,
        mass_negative: r.mass_negative,
        by_horizon: r.by_horizon.into_iter().collect(),
        negative_cells: rows
            .iter()
            .filter(|r| r.weight < -didimp_core::weights::SIGN_TOL)
            .cloned()
            .collect(),
        underidentification: under,
        warnings,
    };
    Ok((summary, rows))
}

pub struct SimulateOptions {
    pub columns: Vec<Column>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    /// Exact moments only, no replications.
    pub exact: bool,
    pub exec: Execution,
}

pub fn simulation_spec(config: &RunConfig, opts: &SimulateOptions) -> DgpSpec {
    let mut spec = config.simulation.clone().unwrap_or_default();
    if let Some(r) = opts.reps {
        spec.reps = r;
    }
    if let Some(s) = opts.seed {
        spec.seed = s;
    }
    spec
}

pub fn simulate(config: &RunConfig, opts: &SimulateOptions) -> Result<BenchReport> {
    let spec = simulation_spec(config, opts);
    let columns = if opts.columns.is_empty() {
        Column::ALL.to_vec()
    } else {
        opts.columns.clone()
    };
    Ok(if opts.exact {
        exact_table(&spec, &columns)?
    } else {
        run_table1(&spec, &columns, opts.exec)?
    })
}

/// Replication `rep` of the simulated design as a panel.
pub fn simulated_panel(spec: &DgpSpec, rep: usize) -> Result<Panel> {
    let d = SimulatedDesign::new(spec)?;
    Ok(d.panel.with_outcomes(&d.draw_outcomes(rep))?)
}

/// Event-study rows: pre-trend coefficients for −k..−1 followed by horizon
/// effects. Horizons come from the configured `horizon` estimands, or from
/// the data when none are configured (unidentified horizons are skipped).
pub fn export_plot(config: &RunConfig, panel: &Panel) -> Result<Vec<PlotRow>> {
    let configured: Vec<NamedEstimand> = config
        .estimands
        .iter()
        .filter(|e| matches!(e.spec, EstimandSpec::Horizon { .. }))
        .cloned()
        .collect();
    let estimands = if configured.is_empty() {
        let mut hs: Vec<i64> = (0..panel.len())
            .filter(|&k| panel.is_treated(k))
            .filter_map(|k| panel.horizon_of(k))
            .collect();
        hs.sort_unstable();
        hs.dedup();
        let model = ImputationModel::new(panel, &config.outcome_model)?;
        let mut keep = Vec::new();
        for h in hs {
            let spec = EstimandSpec::Horizon { h };
            let w = build_estimand(panel, &spec)?;
            if matches!(&config.treatment_effect_model, TreatmentEffectModel::Unrestricted)
                && !model.estimability(&w)?.is_identified()
            {
                log::warn!("horizon {h} is not identified and is left out of the plot");
                continue;
            }
            keep.push(NamedEstimand::new(spec));
        }
        keep
    } else {
        configured
    };
    let mut rows = Vec::new();
    let effects = if estimands.is_empty() {
        Vec::new()
    } else {
        let cfg = RunConfig {
            estimands: estimands.clone(),
            pretest: None,
            ..config.clone()
        };
        let loaded = Loaded {
            panel: panel.clone(),
            load: LoadReport::default(),
        };
        estimate(&cfg, &loaded)?.0.estimates
    };
    match pretest_plan(config, panel).and_then(|p| {
        let mode = config.pretest.clone().unwrap_or_default().mode;
        Ok(p.run(&panel.outcomes(), mode)?)
    }) {
        Ok(r) => {
            for (j, rt) in r.relative_times.iter().enumerate() {
                if let Some(t) = rt {
                    rows.push(PlotRow {
                        relative_time: *t,
                        coefficient: r.gamma_hat[j],
                        se: r.cov_gamma[j][j].max(0.0).sqrt(),
                        kind: PlotKind::Pretrend,
                    });
                }
            }
        }
        Err(e) => log::warn!("no pre-trend coefficients: {e}"),
    }
    for (e, row) in estimands.iter().zip(effects) {
        if let EstimandSpec::Horizon { h } = e.spec {
            rows.push(PlotRow {
                relative_time: h,
                coefficient: row.estimate,
                se: row.se,
                kind: PlotKind::Effect,
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::NothingToPlot);
    }
    Ok(rows)
}
