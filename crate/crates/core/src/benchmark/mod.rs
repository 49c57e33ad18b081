//! Reference DiD estimators, the simulation design and the efficiency/bias
//! comparison harness.

mod dgp;
mod reference;
mod table1;

pub use dgp::{cohort_counts, draw_cohorts, DgpSpec, Noise, SimulatedDesign, DEFAULT_SEED};
pub use reference::{grouped_score_variance, reference_estimator, reference_weights, ReferenceKind};
pub use table1::{
    exact_table, pretest_study, run_table1, BenchReport, BenchRow, Column, Estimator, PretestStudy,
};

use crate::error::{Error, Result};
use crate::panel::Panel;

/// Exact variance Σ_i v_i′Σ_i v_i under `noise` and bias Σ v·contamination.
pub fn exact_moments(
    panel: &Panel,
    v: &[f64],
    noise: &Noise,
    contamination: Option<&[f64]>,
) -> Result<(f64, f64)> {
    if v.len() != panel.len() {
        return Err(Error::DimensionMismatch {
            expected: panel.len(),
            got: v.len(),
        });
    }
    let obs = panel.observations();
    let mut variance = 0.0;
    let mut start = 0;
    while start < obs.len() {
        let mut end = start;
        while end < obs.len() && obs[end].unit == obs[start].unit {
            end += 1;
        }
        for i in start..end {
            for j in start..end {
                variance += v[i] * v[j] * noise.covariance(obs[i].time, obs[j].time);
            }
        }
        start = end;
    }
    let bias = match contamination {
        None => 0.0,
        Some(c) if c.len() != v.len() => {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                got: c.len(),
            })
        }
        Some(c) => v.iter().zip(c).map(|(a, b)| a * b).sum(),
    };
    Ok((variance, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{EventDate, ObsRecord};
    use std::collections::HashMap;

    fn two_by_two() -> (Panel, Vec<f64>) {
        let mut recs = Vec::new();
        for u in ["T", "C"] {
            for t in 1..=2 {
                recs.push(ObsRecord::new(u, t, 0.0));
            }
        }
        let dates: HashMap<String, EventDate> = [
            ("T".into(), EventDate::Finite(2)),
            ("C".into(), EventDate::NeverTreated),
        ]
        .into();
        let p = Panel::new(recs, &dates, vec![]).unwrap();
        let mut v = vec![0.0; 4];
        for (u, t, x) in [("T", 2, 1.0), ("T", 1, -1.0), ("C", 2, -1.0), ("C", 1, 1.0)] {
            v[p.locate(u, t).unwrap()] = x;
        }
        (p, v)
    }

    #[test]
    fn did_variance_iid_and_ar1() {
        let (p, v) = two_by_two();
        let (iid, _) = exact_moments(&p, &v, &Noise::IidNormal { variance: 1.0 }, None).unwrap();
        assert!((iid - 4.0).abs() < 1e-15);
        // each unit: v′Σv = 2 − 2ρ with ρ = 0.5
        let (ar, _) = exact_moments(&p, &v, &Noise::Ar1 { rho: 0.5 }, None).unwrap();
        assert!((ar - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bias_is_weighted_contamination() {
        let (p, v) = two_by_two();
        let c: Vec<f64> = (0..4).map(|k| if p.is_treated(k) { 0.0 } else { 0.3 }).collect();
        let (_, b) = exact_moments(&p, &v, &Noise::default(), Some(&c)).unwrap();
        assert!((b - 0.3 * (-1.0 - 1.0 + 1.0)).abs() < 1e-15);
        assert!(exact_moments(&p, &v[..3], &Noise::default(), None).is_err());
    }
}
