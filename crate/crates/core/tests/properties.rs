mod common;

use std::collections::BTreeMap;

use common::*;
use didimp_core::design::OutcomeModelSpec;
use didimp_core::estimator::ImputationModel;
use didimp_core::inference::{
    conservative_se, covariance_matrix, pretest, unit_scores, PretestMode, TaubarMode, VarianceSpec,
};
use didimp_core::panel::Panel;
use didimp_core::weights::{static_ols_weights, ImpliedWeights};
use didimp_core::Error;
use proptest::prelude::*;

fn setup(seed: u64) -> Option<(Panel, ImputationModel, didimp_core::design::EstimandWeights)> {
    let p = random_panel(seed, 16, 7, 0.1);
    let m = ImputationModel::new(&p, &OutcomeModelSpec::twfe()).ok()?;
    let w = random_estimand(&m, seed)?;
    Some((p, m, w))
}

fn group_key(p: &Panel, k: usize, mode: TaubarMode) -> String {
    let o = p.obs(k);
    match mode {
        TaubarMode::Single => String::new(),
        TaubarMode::ByCohortPeriod => format!("{}:{}", p.event_date(o.unit), o.time),
        TaubarMode::ByHorizon => format!("{}", p.horizon_of(k).unwrap()),
    }
}

/// Unit scores with τ̄ recomputed from scratch without the unit itself.
fn brute_force_leave_out(
    p: &Panel,
    v: &[f64],
    resid: &BTreeMap<usize, f64>,
    tau: &BTreeMap<usize, f64>,
    mode: TaubarMode,
) -> Vec<f64> {
    // group -> unit -> (Σ v, Σ v τ̂)
    let mut agg: BTreeMap<String, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
    for (k, &vk) in v.iter().enumerate() {
        if vk != 0.0 && p.is_treated(k) {
            let e = agg
                .entry(group_key(p, k, mode))
                .or_default()
                .entry(p.obs(k).unit)
                .or_default();
            e.0 += vk;
            e.1 += vk * tau[&k];
        }
    }
    let mut s = vec![0.0; p.n_units()];
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        let u = p.obs(k).unit;
        if p.is_treated(k) {
            let g = &agg[&group_key(p, k, mode)];
            let (num, den) = g
                .iter()
                .filter(|(&j, _)| j != u)
                .fold((0.0, 0.0), |(n, d), (_, &(a, b))| (n + a * b, d + a * a));
            s[u] += vk * (tau[&k] - num / den);
        } else {
            s[u] += vk * resid[&k];
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn implied_weights_reproduce_estimate_and_cancel_fixed_effects(seed in 0u64..100_000) {
        let Some((p, m, w)) = setup(seed) else { return Ok(()) };
        let v = m.implied_weights(&w).unwrap();
        for (k, &vk) in v.iter().enumerate() {
            if p.is_treated(k) {
                prop_assert!((vk - w.get(k)).abs() < 1e-12);
            }
        }
        let fit = m.fit(&p.outcomes(), &w).unwrap();
        let vy: f64 = v.iter().zip(p.outcomes()).map(|(a, b)| a * b).sum();
        prop_assert!((vy - fit.tau_w).abs() < 1e-9 * fit.tau_w.abs().max(1.0));
        // unbiased under any unit and period effects
        let alpha: Vec<f64> = (0..p.n_units()).map(|i| (i as f64 * 1.7).sin() * 5.0).collect();
        let fe: f64 = p
            .observations()
            .iter()
            .zip(&v)
            .map(|(o, vk)| vk * (alpha[o.unit] + (o.time as f64).powi(2)))
            .sum();
        prop_assert!(fe.abs() < 1e-9);
    }

    #[test]
    fn variance_is_nonnegative_and_ignores_unit_constants(seed in 0u64..100_000) {
        let Some((p, m, w)) = setup(seed) else { return Ok(()) };
        let v = ImpliedWeights::from_vector(&p, m.implied_weights(&w).unwrap());
        for mode in [TaubarMode::Single, TaubarMode::ByCohortPeriod, TaubarMode::ByHorizon] {
            let spec = VarianceSpec::new(mode);
            let a = conservative_se(&p, &m.fit(&p.outcomes(), &w).unwrap(), &v, &spec).unwrap();
            prop_assert!(a.sigma_hat_sq >= 0.0);
            let shifted: Vec<f64> = p
                .observations()
                .iter()
                .map(|o| o.outcome + 3.0 * (o.unit as f64).cos())
                .collect();
            let b = conservative_se(&p, &m.fit(&shifted, &w).unwrap(), &v, &spec).unwrap();
            prop_assert!((a.sigma_hat_sq - b.sigma_hat_sq).abs() <= 1e-9 * a.sigma_hat_sq.max(1.0));
        }
    }

    #[test]
    fn leave_out_matches_brute_force(seed in 0u64..100_000) {
        let Some((p, m, w)) = setup(seed) else { return Ok(()) };
        let v = m.implied_weights(&w).unwrap();
        let fit = m.fit(&p.outcomes(), &w).unwrap();
        for mode in [TaubarMode::Single, TaubarMode::ByCohortPeriod, TaubarMode::ByHorizon] {
            let spec = VarianceSpec { taubar_mode: mode, leave_out: true };
            match unit_scores(&p, &v, &fit.residuals, &fit.tau_hat, &spec) {
                Err(Error::LeaveOutUndefined { .. }) => continue,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok(s) => {
                    let oracle = brute_force_leave_out(&p, &v, &fit.residuals, &fit.tau_hat, mode);
                    prop_assert!(max_abs_diff(&s.scores, &oracle) <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn covariance_diagonal_matches_variances(seed in 0u64..100_000) {
        let Some((p, m, w)) = setup(seed) else { return Ok(()) };
        let Some(w2) = random_estimand(&m, seed + 1) else { return Ok(()) };
        let spec = VarianceSpec::new(TaubarMode::Single);
        let items: Vec<_> = [&w, &w2]
            .iter()
            .map(|w| {
                let f = m.fit(&p.outcomes(), w).unwrap();
                let v = ImpliedWeights::from_vector(&p, m.implied_weights(w).unwrap());
                (f, v)
            })
            .collect();
        let refs: Vec<_> = items.iter().map(|(f, v)| (f, v)).collect();
        let c = covariance_matrix(&p, &refs, &spec).unwrap();
        for (i, (f, v)) in items.iter().enumerate() {
            let s = conservative_se(&p, f, v, &spec).unwrap().sigma_hat_sq;
            prop_assert!((c[(i, i)] - s).abs() <= 1e-12 * s.max(1.0));
        }
        prop_assert!(c.symmetric_eigenvalues().min() >= -1e-12);
    }

    #[test]
    fn static_weights_sum_to_one(seed in 0u64..100_000) {
        let p = random_panel(seed, 16, 7, 0.1);
        match static_ols_weights(&p) {
            Ok(r) => prop_assert!((r.sum - 1.0).abs() < 1e-10),
            Err(Error::CollinearTreatment) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }

    #[test]
    fn lead_coefficients_match_dense_regression(seed in 0u64..100_000) {
        let p = random_panel(seed, 16, 7, 0.0);
        let k = 2usize;
        let r = match pretest(&p, &OutcomeModelSpec::twfe(), Some(k), PretestMode::HomoskedasticF) {
            Ok(r) => r,
            Err(Error::InsufficientPreperiods { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        // OLS of Y on unit dummies, period dummies and lead dummies over Ω₀
        let untreated: Vec<usize> = (0..p.len()).filter(|&i| !p.is_treated(i)).collect();
        let (nu, np) = (p.n_units(), p.periods().len());
        let x = nalgebra::DMatrix::from_fn(untreated.len(), nu + np + k, |r, c| {
            let o = p.obs(untreated[r]);
            let h = p.horizon_of(untreated[r]);
            if c < nu {
                (o.unit == c) as u8 as f64
            } else if c < nu + np {
                (o.period == c - nu) as u8 as f64
            } else {
                (h == Some(-((k - (c - nu - np)) as i64))) as u8 as f64
            }
        });
        let y: Vec<f64> = untreated.iter().map(|&i| p.obs(i).outcome).collect();
        let coef = pinv_solve(&x, &y);
        for j in 0..k {
            prop_assert!((coef[nu + np + j] - r.gamma_hat[j]).abs() < 1e-8, "lead {j}");
        }
    }
}
