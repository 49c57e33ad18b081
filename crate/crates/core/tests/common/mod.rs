#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use didimp_core::design::EstimandWeights;
use didimp_core::estimator::ImputationModel;
use didimp_core::panel::{EventDate, ObsRecord, Panel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random unbalanced staggered panel with heterogeneous effects and noise.
pub fn random_panel(seed: u64, max_units: usize, max_periods: i64, missing: f64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = rng.random_range(4..=max_units);
    let periods = rng.random_range(3..=max_periods);
    let mut recs = Vec::new();
    let mut dates = HashMap::new();
    for i in 0..units {
        let e = if rng.random_bool(0.25) {
            EventDate::NeverTreated
        } else {
            EventDate::Finite(rng.random_range(2..=periods + 1))
        };
        let key = format!("u{i}");
        dates.insert(key.clone(), e);
        let alpha: f64 = rng.random_range(-2.0..2.0);
        for t in 1..=periods {
            if rng.random_bool(missing) {
                continue;
            }
            let tau = if e.is_treated_at(t) {
                rng.random_range(0.0..3.0)
            } else {
                0.0
            };
            let y = alpha + 0.7 * t as f64 + tau + rng.random_range(-1.0..1.0);
            recs.push(ObsRecord::new(key.clone(), t, y));
        }
    }
    let keep: std::collections::HashSet<String> = recs.iter().map(|r| r.unit.clone()).collect();
    dates.retain(|k, _| keep.contains(k));
    Panel::new(recs, &dates, vec![]).unwrap()
}

/// Random weights on the treated observations whose counterfactual is identified.
pub fn random_estimand(model: &ImputationModel, seed: u64) -> Option<EstimandWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w: BTreeMap<usize, f64> = model
        .treated()
        .iter()
        .zip(model.imputable())
        .filter(|(_, &ok)| ok)
        .map(|(&k, _)| (k, rng.random_range(-1.0..1.0)))
        .collect();
    (!w.is_empty()).then(|| EstimandWeights::new("random", w))
}

/// Dense TWFE design (unit dummies, period dummies) plus one dummy per
/// treated observation; columns are not normalized.
pub fn dense_joint_design(panel: &Panel) -> (DMatrix<f64>, Vec<usize>) {
    let nu = panel.n_units();
    let np = panel.periods().len();
    let treated: Vec<usize> = (0..panel.len()).filter(|&k| panel.is_treated(k)).collect();
    let mut x = DMatrix::zeros(panel.len(), nu + np + treated.len());
    for (k, o) in panel.observations().iter().enumerate() {
        x[(k, o.unit)] = 1.0;
        x[(k, nu + o.period)] = 1.0;
    }
    for (j, &k) in treated.iter().enumerate() {
        x[(k, nu + np + j)] = 1.0;
    }
    (x, treated)
}

/// Minimum-norm least squares through the eigendecomposition of X′X.
pub fn pinv_solve(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let eig = (x.transpose() * x).symmetric_eigen();
    let tol = 1e-10 * eig.eigenvalues.amax();
    let xty = x.transpose() * DVector::from_column_slice(y);
    let proj = eig.eigenvectors.transpose() * xty;
    let scaled = DVector::from_fn(proj.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > tol {
            proj[i] / l
        } else {
            0.0
        }
    });
    &eig.eigenvectors * scaled
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
