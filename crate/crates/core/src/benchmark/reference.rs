use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{EventDate, Panel};
use crate::weights::ImpliedWeights;

/// Control group of a reference DiD estimator. Both use t = E_i − 1 as the
/// only reference period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Units not yet treated at the outcome period.
    NotYetTreated,
    /// Units of the latest cohort (never-treated units if there are any).
    LastCohort,
}

/// Horizon-`h` ATT as a cohort-size weighted average of CATT_{e,e+h}.
pub fn reference_estimator(panel: &Panel, kind: ReferenceKind, h: i64) -> Result<(f64, ImpliedWeights)> {
    let v = reference_weights(panel, kind, h)?;
    let w = ImpliedWeights::from_vector(panel, v);
    let est = w.apply(&panel.outcomes());
    Ok((est, w))
}

/// Implied weights of [`reference_estimator`]; they do not depend on outcomes.
pub fn reference_weights(panel: &Panel, kind: ReferenceKind, h: i64) -> Result<Vec<f64>> {
    // cohort -> [(k at e+h, k at e−1)]
    let mut treated: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
    for u in 0..panel.n_units() {
        if let Some(e) = panel.event_date(u).finite() {
            if let (Some(kt), Some(kr)) = (panel.find(u, e + h), panel.find(u, e - 1)) {
                treated.entry(e).or_default().push((kt, kr));
            }
        }
    }
    let total: usize = treated.values().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptySupport(format!("h{h}")));
    }
    let last = (0..panel.n_units()).map(|u| panel.event_date(u)).max().unwrap();
    let mut v = vec![0.0; panel.len()];
    for (&e, members) in &treated {
        let t = e + h;
        let share = members.len() as f64 / total as f64;
        let controls: Vec<(usize, usize)> = (0..panel.n_units())
            .filter(|&u| {
                let eu = panel.event_date(u);
                let in_group = match kind {
                    ReferenceKind::NotYetTreated => true,
                    ReferenceKind::LastCohort => eu == last,
                };
                in_group && !eu.is_treated_at(t) && eu != EventDate::Finite(e)
            })
            .filter_map(|u| Some((panel.find(u, t)?, panel.find(u, e - 1)?)))
            .collect();
        if controls.is_empty() {
            return Err(Error::EmptyControlGroup { cohort: e, period: t });
        }
        let a = share / members.len() as f64;
        for &(kt, kr) in members {
            v[kt] += a;
            v[kr] -= a;
        }
        let b = share / controls.len() as f64;
        for &(kt, kr) in &controls {
            v[kt] -= b;
            v[kr] += b;
        }
    }
    Ok(v)
}

/// Clustered variance for linear estimators whose weights are constant
/// within event-date groups and sum to zero within each unit: the unit
/// contributions v_i′Y_i are centered on their group mean with an
/// n/(n − 1) correction.
pub fn grouped_score_variance(panel: &Panel, v: &[f64], y: &[f64]) -> f64 {
    let mut scores = vec![0.0; panel.n_units()];
    for (k, o) in panel.observations().iter().enumerate() {
        scores[o.unit] += v[k] * y[k];
    }
    let mut groups: BTreeMap<EventDate, Vec<f64>> = BTreeMap::new();
    for (u, s) in scores.into_iter().enumerate() {
        groups.entry(panel.event_date(u)).or_default().push(s);
    }
    groups
        .values()
        .filter(|s| s.len() > 1)
        .map(|s| {
            let n = s.len() as f64;
            let m = s.iter().sum::<f64>() / n;
            n / (n - 1.0) * s.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        })
        .sum()
}
