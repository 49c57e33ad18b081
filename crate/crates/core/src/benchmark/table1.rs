use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::dgp::{DgpSpec, Noise, SimulatedDesign};
use super::reference::{grouped_score_variance, reference_weights, ReferenceKind};
use crate::design::{build_estimand, EstimandSpec, OutcomeModelSpec};
use crate::error::{Error, Result};
use crate::estimator::ImputationModel;
use crate::inference::{unit_scores, PretestMode, PretestPlan, VarianceSpec};
use crate::panel::format_f64;
use crate::par::{map_indexed, Execution};

/// Simulation designs of the efficiency/bias comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Baseline,
    MorePrePeriods,
    Heteroskedastic,
    Ar1,
    Anticipation,
}

impl Column {
    pub const ALL: [Column; 5] = [
        Column::Baseline,
        Column::MorePrePeriods,
        Column::Heteroskedastic,
        Column::Ar1,
        Column::Anticipation,
    ];

    /// Variant of the base spec for this column.
    pub fn apply(self, base: &DgpSpec) -> DgpSpec {
        let mut s = base.clone();
        match self {
            Column::Baseline => {}
            Column::MorePrePeriods => s.first_period -= 4,
            Column::Heteroskedastic => s.noise = Noise::Heteroskedastic,
            Column::Ar1 => s.noise = Noise::Ar1 { rho: 0.5 },
            Column::Anticipation => s.anticipation = Some(1.0 / (s.units as f64).sqrt()),
        }
        s
    }

    pub fn name(self) -> &'static str {
        match self {
            Column::Baseline => "baseline",
            Column::MorePrePeriods => "more_pre_periods",
            Column::Heteroskedastic => "heteroskedastic",
            Column::Ar1 => "ar1",
            Column::Anticipation => "anticipation",
        }
    }

    pub fn parse(s: &str) -> Option<Column> {
        Column::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Imputation,
    NotYetTreated,
    LastCohort,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [
        Estimator::Imputation,
        Estimator::NotYetTreated,
        Estimator::LastCohort,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Estimator::Imputation => "Imputation",
            Estimator::NotYetTreated => "DCDH",
            Estimator::LastCohort => "SA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub column: Column,
    pub estimator: Estimator,
    pub horizon: i64,
    /// True estimand value.
    pub target: f64,
    pub exact_variance: f64,
    pub exact_bias: f64,
    pub mean_estimate: f64,
    pub mc_variance: f64,
    /// Mean of the estimated variance across replications.
    pub mean_variance_estimate: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reps: usize,
    pub seed: u64,
    pub cohort_counts: BTreeMap<i64, usize>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn get(&self, column: Column, estimator: Estimator, horizon: i64) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.column == column && r.estimator == estimator && r.horizon == horizon)
    }

    /// One row per horizon and estimator, one column group per design.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "horizon",
            "estimator",
            "column",
            "exact_variance",
            "exact_bias",
            "mc_variance",
            "mean_estimate",
            "mean_variance_estimate",
            "coverage",
        ])?;
        let mut rows: Vec<&BenchRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| (r.horizon, r.estimator, r.column));
        for r in rows {
            out.write_record([
                r.horizon.to_string(),
                r.estimator.short_name().to_string(),
                r.column.name().to_string(),
                format_f64(r.exact_variance),
                format_f64(r.exact_bias),
                format_f64(r.mc_variance),
                format_f64(r.mean_estimate),
                format_f64(r.mean_variance_estimate),
                format_f64(r.coverage),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Weights of the three estimators at each horizon for one design.
struct Prepared {
    design: SimulatedDesign,
    model: ImputationModel,
    horizons: Vec<i64>,
    /// [horizon][estimator] -> v
    weights: Vec<[Vec<f64>; 3]>,
    targets: Vec<f64>,
    var_spec: Vec<VarianceSpec>,
}

fn prepare(spec: &DgpSpec) -> Result<Prepared> {
    let design = SimulatedDesign::new(spec)?;
    let model = ImputationModel::new(&design.panel, &OutcomeModelSpec::twfe())?;
    let horizons = spec.horizons();
    let mut weights = Vec::new();
    let mut targets = Vec::new();
    let mut var_spec = Vec::new();
    for &h in &horizons {
        let w = build_estimand(&design.panel, &EstimandSpec::Horizon { h })?;
        targets.push(w.weights.iter().map(|(&k, &x)| x * design.effects[k]).sum());
        var_spec.push(VarianceSpec::default_for(&design.panel, &w));
        weights.push([
            model.implied_weights(&w)?,
            reference_weights(&design.panel, ReferenceKind::NotYetTreated, h)?,
            reference_weights(&design.panel, ReferenceKind::LastCohort, h)?,
        ]);
    }
    Ok(Prepared {
        design,
        model,
        horizons,
        weights,
        targets,
        var_spec,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact variance under the spec's noise and exact bias from its
/// contamination, without simulation.
pub fn exact_table(spec: &DgpSpec, columns: &[Column]) -> Result<BenchReport> {
    run(spec, columns, Execution::Sequential, false)
}

/// Draws cohorts once, then `reps` noise replications per column, in parallel
/// when requested. Results do not depend on the execution mode.
pub fn run_table1(spec: &DgpSpec, columns: &[Column], exec: Execution) -> Result<BenchReport> {
    run(spec, columns, exec, true)
}

fn run(spec: &DgpSpec, columns: &[Column], exec: Execution, simulate: bool) -> Result<BenchReport> {
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975);
    let mut rows = Vec::new();
    let mut cohort_counts = BTreeMap::new();
    for &col in columns {
        let cspec = col.apply(spec);
        let p = prepare(&cspec)?;
        cohort_counts = p.design.cohort_counts();
        let nh = p.horizons.len();
        // rep -> [horizon][estimator] -> (estimate, variance estimate)
        let draws: Vec<Result<RepDraw>> = if simulate {
            map_indexed(cspec.reps, exec, |rep| simulate_rep(&p, rep))
        } else {
            Vec::new()
        };
        let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;
        for (hi, &h) in p.horizons.iter().enumerate() {
            for (ei, est) in Estimator::ALL.into_iter().enumerate() {
                let v = &p.weights[hi][ei];
                let mut row = BenchRow {
                    column: col,
                    estimator: est,
                    horizon: h,
                    target: p.targets[hi],
                    exact_variance: p.design.exact_variance(v),
                    exact_bias: dot(v, &p.design.contamination),
                    mean_estimate: f64::NAN,
                    mc_variance: f64::NAN,
                    mean_variance_estimate: f64::NAN,
                    coverage: f64::NAN,
                };
                if !draws.is_empty() {
                    let n = draws.len() as f64;
                    let ests: Vec<f64> = draws.iter().map(|d| d[hi][ei].0).collect();
                    let mean = ests.iter().sum::<f64>() / n;
                    row.mean_estimate = mean;
                    row.mc_variance =
                        ests.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
                    row.mean_variance_estimate = draws.iter().map(|d| d[hi][ei].1).sum::<f64>() / n;
                    row.coverage = draws
                        .iter()
                        .filter(|d| {
                            let (e, s2) = d[hi][ei];
                            (e - p.targets[hi]).abs() <= z * s2.sqrt()
                        })
                        .count() as f64
                        / n;
                }
                rows.push(row);
            }
        }
        debug_assert_eq!(rows.len() % (3 * nh), 0);
    }
    Ok(BenchReport {
        reps: if simulate { spec.reps } else { 0 },
        seed: spec.seed,
        cohort_counts,
        rows,
    })
}

/// Per horizon, (estimate, variance estimate) for each estimator.
type RepDraw = Vec<[(f64, f64); 3]>;

fn simulate_rep(p: &Prepared, rep: usize) -> Result<RepDraw> {
    let panel = &p.design.panel;
    let y = p.design.draw_outcomes(rep);
    let of = p.model.fit_outcomes(&y)?;
    let residuals: BTreeMap<usize, f64> = p.model.untreated().iter().copied().zip(of.residuals).collect();
    let tau_hat: BTreeMap<usize, f64> = p
        .model
        .treated()
        .iter()
        .zip(&of.y0_hat)
        .filter_map(|(&k, y0)| y0.map(|y0| (k, y[k] - y0)))
        .collect();
    let mut out = Vec::with_capacity(p.horizons.len());
    for (hi, ws) in p.weights.iter().enumerate() {
        let imp = {
            let s = unit_scores(panel, &ws[0], &residuals, &tau_hat, &p.var_spec[hi])?;
            (dot(&ws[0], &y), s.scores.iter().map(|x| x * x).sum())
        };
        let reference = |v: &Vec<f64>| (dot(v, &y), grouped_score_variance(panel, v, &y));
        out.push([imp, reference(&ws[1]), reference(&ws[2])]);
    }
    Ok(out)
}

/// Pre-trend test behaviour under the null across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretestStudy {
    pub leads: usize,
    pub reps: usize,
    pub level: f64,
    pub rejection_rate: f64,
    /// Correlation of the imputation estimate with each lead coefficient.
    pub correlations: Vec<f64>,
    pub p_values: Vec<f64>,
}

/// Runs the lead test and the imputation estimator for `estimand` on each replication.
pub fn pretest_study(
    spec: &DgpSpec,
    leads: usize,
    estimand: &EstimandSpec,
    mode: PretestMode,
    level: f64,
    exec: Execution,
) -> Result<PretestStudy> {
    let design = SimulatedDesign::new(spec)?;
    let plan = PretestPlan::new(&design.panel, &OutcomeModelSpec::twfe(), leads)?;
    let model = ImputationModel::new(&design.panel, &OutcomeModelSpec::twfe())?;
    let v = model.implied_weights(&build_estimand(&design.panel, estimand)?)?;
    let draws = map_indexed(spec.reps, exec, |rep| {
        let y = design.draw_outcomes(rep);
        plan.run(&y, mode).map(|r| (dot(&v, &y), r.gamma_hat, r.p_value))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if draws.len() < 3 {
        return Err(Error::InvalidSpec("need at least 3 replications".into()));
    }
    let q = plan.n_coefficients();
    let est: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let correlations = (0..q)
        .map(|j| {
            let g: Vec<f64> = draws.iter().map(|d| d.1[j]).collect();
            correlation(&est, &g)
        })
        .collect();
    let p_values: Vec<f64> = draws.iter().map(|d| d.2).collect();
    let rejection_rate = p_values.iter().filter(|&&p| p < level).count() as f64 / draws.len() as f64;
    Ok(PretestStudy {
        leads,
        reps: draws.len(),
        level,
        rejection_rate,
        correlations,
        p_values,
    })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let spec = DgpSpec {
            units: 40,
            reps: 12,
            ..DgpSpec::default()
        };
        let a = run_table1(&spec, &[Column::Baseline], Execution::Sequential).unwrap();
        let b = run_table1(&spec, &[Column::Baseline], Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn correlation_of_affine_pair() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let b: Vec<f64> = a.iter().map(|x| 3.0 - 2.0 * x).collect();
        assert!((correlation(&a, &b) + 1.0).abs() < 1e-12);
    }
}
