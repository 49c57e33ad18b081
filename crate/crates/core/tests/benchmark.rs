use didimp_core::benchmark::{
    exact_table, reference_weights, run_table1, Column, DgpSpec, Estimator, ReferenceKind, SimulatedDesign,
};
use didimp_core::design::{build_estimand, EstimandSpec, OutcomeModelSpec};
use didimp_core::estimator::ImputationModel;
use didimp_core::par::Execution;

#[test]
fn imputation_is_most_efficient_under_homoskedasticity() {
    let t = exact_table(&DgpSpec::default(), &[Column::Baseline, Column::MorePrePeriods]).unwrap();
    for col in [Column::Baseline, Column::MorePrePeriods] {
        for h in 0..=4 {
            let imp = t.get(col, Estimator::Imputation, h).unwrap().exact_variance;
            for e in [Estimator::NotYetTreated, Estimator::LastCohort] {
                assert!(
                    imp <= t.get(col, e, h).unwrap().exact_variance,
                    "{col:?} h{h} {e:?}"
                );
            }
        }
    }
}

#[test]
fn extra_pre_periods_only_help_imputation() {
    let t = exact_table(&DgpSpec::default(), &[Column::Baseline, Column::MorePrePeriods]).unwrap();
    for h in 0..=4 {
        let var = |c, e| t.get(c, e, h).unwrap().exact_variance;
        assert!(
            var(Column::MorePrePeriods, Estimator::Imputation) < var(Column::Baseline, Estimator::Imputation)
        );
        for e in [Estimator::NotYetTreated, Estimator::LastCohort] {
            assert!((var(Column::MorePrePeriods, e) - var(Column::Baseline, e)).abs() < 1e-12);
        }
    }
}

#[test]
fn reference_weights_are_unbiased_for_the_horizon_estimand() {
    let d = SimulatedDesign::new(&DgpSpec::default()).unwrap();
    let p = &d.panel;
    for h in 0..=4 {
        let w = build_estimand(p, &EstimandSpec::Horizon { h }).unwrap();
        for kind in [ReferenceKind::NotYetTreated, ReferenceKind::LastCohort] {
            let v = reference_weights(p, kind, h).unwrap();
            for (k, &vk) in v.iter().enumerate() {
                if p.is_treated(k) {
                    assert!((vk - w.get(k)).abs() < 1e-14);
                }
            }
            let fe: f64 = p
                .observations()
                .iter()
                .zip(&v)
                .map(|(o, vk)| vk * ((o.unit as f64).sqrt() + 0.3 * (o.time as f64).powi(3)))
                .sum();
            assert!(fe.abs() < 1e-10);
        }
    }
}

#[test]
fn equal_sensitivity_to_linear_pretrends() {
    let d = SimulatedDesign::new(&DgpSpec::default()).unwrap();
    let p = &d.panel;
    let model = ImputationModel::new(p, &OutcomeModelSpec::twfe()).unwrap();
    for (k0, k1) in [(1.0, 0.0), (0.0, 1.0), (-0.4, 0.25)] {
        let y: Vec<f64> = (0..p.len())
            .map(|k| {
                if p.is_treated(k) {
                    0.0
                } else {
                    k0 + k1 * p.horizon_of(k).unwrap() as f64
                }
            })
            .collect();
        for h in 0..=4 {
            let w = build_estimand(p, &EstimandSpec::Horizon { h }).unwrap();
            let expected: f64 = -w
                .weights
                .iter()
                .map(|(&k, &x)| x * (k0 + k1 * p.horizon_of(k).unwrap() as f64))
                .sum::<f64>();
            let vs = [
                model.implied_weights(&w).unwrap(),
                reference_weights(p, ReferenceKind::NotYetTreated, h).unwrap(),
                reference_weights(p, ReferenceKind::LastCohort, h).unwrap(),
            ];
            for v in vs {
                let bias: f64 = v.iter().zip(&y).map(|(a, b)| a * b).sum();
                assert!((bias - expected).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn monte_carlo_agrees_with_exact_moments() {
    let spec = DgpSpec {
        reps: 400,
        ..DgpSpec::default()
    };
    let r = run_table1(&spec, &[Column::Baseline], Execution::Parallel).unwrap();
    let n = spec.reps as f64;
    for row in &r.rows {
        // unbiased: mean within 4 standard errors of h + 1
        let se_mean = (row.exact_variance / n).sqrt();
        assert!((row.mean_estimate - row.target).abs() <= 4.0 * se_mean, "{row:?}");
        assert!((row.target - (row.horizon as f64 + 1.0)).abs() < 1e-12);
        // sample variance of normal draws has sd ≈ σ²·sqrt(2/(n−1))
        let se_var = row.exact_variance * (2.0 / (n - 1.0)).sqrt();
        assert!(
            (row.mc_variance - row.exact_variance).abs() <= 3.0 * se_var,
            "{row:?}"
        );
        assert!((0.0..=1.0).contains(&row.coverage));
    }
}

#[test]
fn csv_layout() {
    let t = exact_table(&DgpSpec::default(), &[Column::Baseline]).unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 15);
    assert!(text.starts_with("horizon,estimator,column,exact_variance"));
}
