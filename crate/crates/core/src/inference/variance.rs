use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::EstimandWeights;
use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::panel::Panel;
use crate::weights::ImpliedWeights;

/// How treated observations are grouped when averaging effects for the
/// treated-side residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaubarMode {
    Single,
    ByCohortPeriod,
    ByHorizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarianceSpec {
    pub taubar_mode: TaubarMode,
    #[serde(default)]
    pub leave_out: bool,
}

/// Cohort-period cells need at least this many treated units for the cell-wise default.
pub const MIN_CELL_UNITS: usize = 5;

impl VarianceSpec {
    pub fn new(taubar_mode: TaubarMode) -> Self {
        VarianceSpec {
            taubar_mode,
            leave_out: false,
        }
    }

    /// Cell-wise averages when every cohort-period cell touched by `w` has
    /// at least [`MIN_CELL_UNITS`] treated units, one overall average otherwise.
    pub fn default_for(panel: &Panel, w: &EstimandWeights) -> Self {
        let mut cells: HashMap<(i64, i64), usize> = HashMap::new();
        for k in (0..panel.len()).filter(|&k| panel.is_treated(k)) {
            let o = panel.obs(k);
            let e = panel.event_date(o.unit).finite().unwrap();
            *cells.entry((e, o.time)).or_insert(0) += 1;
        }
        let large = w.weights.iter().filter(|(_, &v)| v != 0.0).all(|(&k, _)| {
            let o = panel.obs(k);
            let e = panel.event_date(o.unit).finite().unwrap();
            cells[&(e, o.time)] >= MIN_CELL_UNITS
        });
        VarianceSpec::new(if large {
            TaubarMode::ByCohortPeriod
        } else {
            TaubarMode::Single
        })
    }
}

/// Per-unit score terms Σ_t v_it ε_it, whose squares sum to the variance estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScores {
    pub scores: Vec<f64>,
    /// Averaged effect per treated group.
    pub taubar: Vec<(String, f64)>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeResult {
    pub sigma_hat: f64,
    pub sigma_hat_sq: f64,
    pub spec: VarianceSpec,
    pub taubar: Vec<(String, f64)>,
    pub flags: Vec<String>,
}

fn group_label(panel: &Panel, k: usize, mode: TaubarMode) -> String {
    let o = panel.obs(k);
    match mode {
        TaubarMode::Single => "all".into(),
        TaubarMode::ByCohortPeriod => format!("e{}t{}", panel.event_date(o.unit), o.time),
        TaubarMode::ByHorizon => format!("h{}", panel.horizon_of(k).unwrap()),
    }
}

/// Score terms for a linear estimator with weights `v`, untreated residuals
/// and treated effect estimates. Untreated observations contribute v·ε̂;
/// treated ones contribute v·(τ̂ − τ̄) with τ̄ a v²-weighted average of
/// unit-level effect estimates within the observation's group.
pub fn unit_scores(
    panel: &Panel,
    v: &[f64],
    residuals: &BTreeMap<usize, f64>,
    tau_hat: &BTreeMap<usize, f64>,
    spec: &VarianceSpec,
) -> Result<UnitScores> {
    if v.len() != panel.len() {
        return Err(Error::DimensionMismatch {
            expected: panel.len(),
            got: v.len(),
        });
    }
    let mut scores = vec![0.0; panel.n_units()];
    // group label -> unit -> (Σ v, Σ v τ̂)
    let mut groups: BTreeMap<String, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
    let mut periods_per_unit: HashMap<usize, usize> = HashMap::new();
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        let u = panel.obs(k).unit;
        if panel.is_treated(k) {
            let t = tau_hat
                .get(&k)
                .ok_or_else(|| Error::SolverFailure(format!("no effect estimate for {}", panel.label(k))))?;
            let cell = groups
                .entry(group_label(panel, k, spec.taubar_mode))
                .or_default()
                .entry(u)
                .or_insert((0.0, 0.0));
            cell.0 += vk;
            cell.1 += vk * t;
            *periods_per_unit.entry(u).or_insert(0) += 1;
        } else {
            let e = residuals
                .get(&k)
                .ok_or_else(|| Error::SolverFailure(format!("no residual for {}", panel.label(k))))?;
            scores[u] += vk * e;
        }
    }
    let mut flags = Vec::new();
    if spec.taubar_mode != TaubarMode::Single && periods_per_unit.values().any(|&n| n > 1) {
        flags.push("taubar_not_minimizing".to_string());
    }
    let mut taubar = Vec::with_capacity(groups.len());
    for (label, units) in &groups {
        let denom: f64 = units.values().map(|(s, _)| s * s).sum();
        let num: f64 = units.values().map(|(s, sv)| s * sv).sum();
        let tb = if denom > 0.0 {
            num / denom
        } else {
            flags.push(format!("degenerate_denominator:{label}"));
            0.0
        };
        taubar.push((label.clone(), tb));
        for (&u, &(s, sv)) in units {
            // Σ_t v (τ̂ − τ̄) over the unit's observations in this group
            let mut term = sv - s * tb;
            if spec.leave_out && denom > 0.0 {
                let share = s * s / denom;
                if 1.0 - share <= 1e-12 {
                    return Err(Error::LeaveOutUndefined { group: label.clone() });
                }
                term /= 1.0 - share;
            }
            scores[u] += term;
        }
    }
    Ok(UnitScores {
        scores,
        taubar,
        flags,
    })
}

/// Conservative variance Σ_i (Σ_t v_it ε_it)² of a linear estimator.
pub fn conservative_se(
    panel: &Panel,
    fit: &FitResult,
    v: &ImpliedWeights,
    spec: &VarianceSpec,
) -> Result<SeResult> {
    let s = unit_scores(panel, &v.v, &fit.residuals, &fit.tau_hat, spec)?;
    let sigma_hat_sq: f64 = s.scores.iter().map(|x| x * x).sum();
    Ok(SeResult {
        sigma_hat: sigma_hat_sq.sqrt(),
        sigma_hat_sq,
        spec: *spec,
        taubar: s.taubar,
        flags: s.flags,
    })
}

/// Clustered covariance Σ_i s_i s_i′ for several estimands on one panel.
pub fn covariance_matrix(
    panel: &Panel,
    items: &[(&FitResult, &ImpliedWeights)],
    spec: &VarianceSpec,
) -> Result<DMatrix<f64>> {
    let scores = items
        .iter()
        .map(|(f, v)| unit_scores(panel, &v.v, &f.residuals, &f.tau_hat, spec).map(|s| s.scores))
        .collect::<Result<Vec<_>>>()?;
    let m = items.len();
    Ok(DMatrix::from_fn(m, m, |a, b| {
        scores[a].iter().zip(&scores[b]).map(|(x, y)| x * y).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_estimand, EstimandSpec, OutcomeModelSpec};
    use crate::estimator::ImputationModel;
    use crate::panel::{EventDate, ObsRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_panel(seed: u64, units: usize, periods: i64, noise: f64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        let mut dates = std::collections::HashMap::new();
        for i in 0..units {
            let e = if i % 4 == 3 {
                EventDate::NeverTreated
            } else {
                EventDate::Finite(rng.random_range(2..=periods))
            };
            dates.insert(format!("u{i}"), e);
            for t in 1..=periods {
                let tau = if e.is_treated_at(t) {
                    1.0 + rng.random::<f64>()
                } else {
                    0.0
                };
                recs.push(ObsRecord::new(
                    format!("u{i}"),
                    t,
                    i as f64 + t as f64 + tau + noise * rng.random::<f64>(),
                ));
            }
        }
        Panel::new(recs, &dates, vec![]).unwrap()
    }

    fn fit(p: &Panel, spec: &EstimandSpec) -> (FitResult, ImpliedWeights) {
        let m = ImputationModel::new(p, &OutcomeModelSpec::twfe()).unwrap();
        let w = build_estimand(p, spec).unwrap();
        let f = m.fit(&p.outcomes(), &w).unwrap();
        let v = ImpliedWeights::from_vector(p, m.implied_weights(&w).unwrap());
        (f, v)
    }

    #[test]
    fn single_average_minimizes_effect_dispersion() {
        // untreated outcomes follow the model exactly, so only effect heterogeneity remains
        let p = random_panel(3, 12, 5, 0.0);
        let (f, v) = fit(&p, &EstimandSpec::Att);
        let spec = VarianceSpec::new(TaubarMode::Single);
        let base = conservative_se(&p, &f, &v, &spec).unwrap();
        let tb = base.taubar[0].1;
        // σ̂²(c) for a constant c, recomputed from scratch
        let sigma = |c: f64| -> f64 {
            let mut s = vec![0.0; p.n_units()];
            for (k, &vk) in v.v.iter().enumerate() {
                let u = p.obs(k).unit;
                s[u] += vk
                    * match f.residuals.get(&k) {
                        Some(e) => *e,
                        None if vk != 0.0 => f.tau_hat[&k] - c,
                        None => 0.0,
                    };
            }
            s.iter().map(|x| x * x).sum()
        };
        assert!((sigma(tb) - base.sigma_hat_sq).abs() < 1e-10);
        for d in [-1.0, -0.1, -0.01, 0.01, 0.1, 1.0] {
            assert!(sigma(tb + d) >= base.sigma_hat_sq - 1e-12);
        }
    }

    #[test]
    fn invariant_to_unit_constants() {
        let p = random_panel(5, 10, 4, 1.0);
        let (f, v) = fit(&p, &EstimandSpec::Att);
        let spec = VarianceSpec::new(TaubarMode::Single);
        let a = conservative_se(&p, &f, &v, &spec).unwrap().sigma_hat_sq;
        let shifted: Vec<f64> = p
            .observations()
            .iter()
            .map(|o| o.outcome + 10.0 * (o.unit as f64).sin())
            .collect();
        let p2 = p.with_outcomes(&shifted).unwrap();
        let (f2, v2) = fit(&p2, &EstimandSpec::Att);
        let b = conservative_se(&p2, &f2, &v2, &spec).unwrap().sigma_hat_sq;
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn single_estimand_covariance_matches_variance() {
        let p = random_panel(9, 10, 4, 1.0);
        let (f, v) = fit(&p, &EstimandSpec::Horizon { h: 0 });
        let spec = VarianceSpec::new(TaubarMode::ByHorizon);
        let se = conservative_se(&p, &f, &v, &spec).unwrap();
        let m = covariance_matrix(&p, &[(&f, &v)], &spec).unwrap();
        assert!((m[(0, 0)] - se.sigma_hat_sq).abs() < 1e-12);
    }

    #[test]
    fn single_unit_group_rejects_leave_out() {
        let p = random_panel(1, 8, 4, 1.0);
        let (f, v) = fit(&p, &EstimandSpec::Horizon { h: 0 });
        let spec = VarianceSpec {
            taubar_mode: TaubarMode::ByCohortPeriod,
            leave_out: true,
        };
        // with two units per cell at most, some cell is likely a singleton
        let singleton =
            v.v.iter()
                .enumerate()
                .filter(|(k, &x)| x != 0.0 && p.is_treated(*k))
                .map(|(k, _)| group_label(&p, k, TaubarMode::ByCohortPeriod))
                .fold(HashMap::new(), |mut m: HashMap<String, usize>, g| {
                    *m.entry(g).or_default() += 1;
                    m
                })
                .values()
                .any(|&c| c == 1);
        let r = conservative_se(&p, &f, &v, &spec);
        assert_eq!(singleton, matches!(r, Err(Error::LeaveOutUndefined { .. })));
    }
}
