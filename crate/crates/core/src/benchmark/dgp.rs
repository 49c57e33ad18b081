use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{EventDate, ObsRecord, Panel};

/// Cohort seed whose draw of 250 units over event dates 2..=7 puts 41 units
/// at E = 2 and 45 at E = 7.
pub const DEFAULT_SEED: u64 = 285;

/// Error covariance within a unit; units are independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    IidNormal {
        variance: f64,
    },
    /// Var(ε_it) = t.
    Heteroskedastic,
    /// Stationary AR(1) with unit variance.
    Ar1 {
        rho: f64,
    },
}

impl Default for Noise {
    fn default() -> Self {
        Noise::IidNormal { variance: 1.0 }
    }
}

impl Noise {
    pub fn covariance(&self, t: i64, s: i64) -> f64 {
        match *self {
            Noise::IidNormal { variance } => {
                if t == s {
                    variance
                } else {
                    0.0
                }
            }
            Noise::Heteroskedastic => {
                if t == s {
                    t as f64
                } else {
                    0.0
                }
            }
            Noise::Ar1 { rho } => rho.powi((t - s).unsigned_abs() as i32),
        }
    }

    fn validate(&self, first_period: i64) -> Result<()> {
        match *self {
            Noise::IidNormal { variance } if !(variance >= 0.0 && variance.is_finite()) => {
                Err(Error::InvalidSpec(format!("noise variance {variance}")))
            }
            Noise::Heteroskedastic if first_period < 1 => Err(Error::InvalidSpec(
                "heteroskedastic noise needs positive periods".into(),
            )),
            Noise::Ar1 { rho } if !(rho > -1.0 && rho < 1.0) => Err(Error::InvalidSpec(format!(
                "AR(1) coefficient {rho} outside (-1, 1)"
            ))),
            _ => Ok(()),
        }
    }

    /// One draw for a unit observed at the ascending periods `times`.
    fn draw<R: Rng>(&self, times: &[i64], rng: &mut R) -> Vec<f64> {
        match *self {
            Noise::IidNormal { variance } => times
                .iter()
                .map(|_| variance.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Noise::Heteroskedastic => times
                .iter()
                .map(|&t| (t as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Noise::Ar1 { rho } => {
                let mut out = Vec::with_capacity(times.len());
                let mut prev: Option<(i64, f64)> = None;
                for &t in times {
                    let z: f64 = rng.sample(StandardNormal);
                    let e = match prev {
                        None => z,
                        Some((s, x)) => {
                            let r = rho.powi((t - s) as i32);
                            r * x + (1.0 - r * r).sqrt() * z
                        }
                    };
                    out.push(e);
                    prev = Some((t, e));
                }
                out
            }
        }
    }
}

/// Simulated staggered-adoption panel: α_i = −E_i, β_t = 3t, τ_it = K_it + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub units: usize,
    pub first_period: i64,
    pub last_period: i64,
    /// Event dates drawn uniformly; dates after `last_period` are never treated in sample.
    pub event_dates: Vec<i64>,
    #[serde(default)]
    pub noise: Noise,
    /// Added to the outcome at t = E_i − 1.
    #[serde(default)]
    pub anticipation: Option<f64>,
    /// Standard deviation of a unit-level deviation added to every treated effect.
    #[serde(default)]
    pub effect_heterogeneity: f64,
    pub reps: usize,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            units: 250,
            first_period: 1,
            last_period: 6,
            event_dates: (2..=7).collect(),
            noise: Noise::default(),
            anticipation: None,
            effect_heterogeneity: 0.0,
            reps: 500,
            seed: DEFAULT_SEED,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.reps == 0 {
            return Err(Error::InvalidSpec("units and reps must be positive".into()));
        }
        if self.first_period > self.last_period {
            return Err(Error::InvalidSpec("empty period range".into()));
        }
        if self.event_dates.is_empty() {
            return Err(Error::InvalidSpec("no event dates to draw from".into()));
        }
        if self.event_dates.iter().any(|&e| e <= self.first_period) {
            return Err(Error::InvalidSpec(
                "event dates must follow the first period".into(),
            ));
        }
        if !(self.effect_heterogeneity >= 0.0) {
            return Err(Error::InvalidSpec("negative effect heterogeneity".into()));
        }
        self.noise.validate(self.first_period)
    }

    pub fn periods(&self) -> Vec<i64> {
        (self.first_period..=self.last_period).collect()
    }

    /// Horizons with at least one treated cell: 0..=last_period − min event date.
    pub fn horizons(&self) -> Vec<i64> {
        let e_min = self
            .event_dates
            .iter()
            .copied()
            .min()
            .unwrap_or(self.last_period + 1);
        (0..=self.last_period - e_min).collect()
    }
}

/// Event date per unit, drawn once from the spec's seed.
pub fn draw_cohorts(spec: &DgpSpec) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.units)
        .map(|_| *spec.event_dates.choose(&mut rng).expect("non-empty event dates"))
        .collect()
}

pub fn cohort_counts(dates: &[i64]) -> BTreeMap<i64, usize> {
    let mut m = BTreeMap::new();
    for &e in dates {
        *m.entry(e).or_insert(0) += 1;
    }
    m
}

/// Fixed part of a simulated panel; outcomes vary only through the noise.
#[derive(Debug, Clone)]
pub struct SimulatedDesign {
    pub spec: DgpSpec,
    pub event_dates: Vec<i64>,
    /// Panel whose outcomes are the noise-free means.
    pub panel: Panel,
    /// True treatment effect per observation (0 when untreated).
    pub effects: Vec<f64>,
    /// Violation of parallel trends per observation (anticipation).
    pub contamination: Vec<f64>,
    /// Observation index ranges per unit.
    unit_ranges: Vec<(usize, usize)>,
}

impl SimulatedDesign {
    pub fn new(spec: &DgpSpec) -> Result<Self> {
        spec.validate()?;
        let event_dates = draw_cohorts(spec);
        let mut het_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        het_rng.set_stream(u64::MAX);
        let het: Vec<f64> = (0..spec.units)
            .map(|_| spec.effect_heterogeneity * het_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut records = Vec::new();
        let mut dates = HashMap::new();
        for (i, &e) in event_dates.iter().enumerate() {
            let key = format!("u{i:04}");
            dates.insert(key.clone(), EventDate::Finite(e));
            for t in spec.first_period..=spec.last_period {
                records.push(ObsRecord::new(key.clone(), t, 0.0));
            }
        }
        let base = Panel::new(records, &dates, Vec::new())?;
        let mut mean = Vec::with_capacity(base.len());
        let mut effects = Vec::with_capacity(base.len());
        let mut contamination = Vec::with_capacity(base.len());
        let mut unit_ranges = vec![(usize::MAX, 0); base.n_units()];
        for (k, o) in base.observations().iter().enumerate() {
            let e = event_dates[o.unit];
            let tau = if o.time >= e {
                (o.time - e) as f64 + 1.0 + het[o.unit]
            } else {
                0.0
            };
            let c = match spec.anticipation {
                Some(d) if o.time == e - 1 => d,
                _ => 0.0,
            };
            mean.push(-(e as f64) + 3.0 * o.time as f64 + tau + c);
            effects.push(tau);
            contamination.push(c);
            let r = &mut unit_ranges[o.unit];
            r.0 = r.0.min(k);
            r.1 = r.1.max(k + 1);
        }
        Ok(SimulatedDesign {
            spec: spec.clone(),
            event_dates,
            panel: base.with_outcomes(&mean)?,
            effects,
            contamination,
            unit_ranges,
        })
    }

    pub fn cohort_counts(&self) -> BTreeMap<i64, usize> {
        cohort_counts(&self.event_dates)
    }

    /// Outcomes for replication `rep`, from an independent stream of the seed.
    pub fn draw_outcomes(&self, rep: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(rep as u64 + 1);
        let mut y = self.panel.outcomes();
        let obs = self.panel.observations();
        for &(a, b) in &self.unit_ranges {
            let times: Vec<i64> = obs[a..b].iter().map(|o| o.time).collect();
            for (yk, e) in y[a..b].iter_mut().zip(self.spec.noise.draw(&times, &mut rng)) {
                *yk += e;
            }
        }
        y
    }

    /// Σ_i v_i′Σ_i v_i under the spec's noise.
    pub fn exact_variance(&self, v: &[f64]) -> f64 {
        let obs = self.panel.observations();
        self.unit_ranges
            .iter()
            .map(|&(a, b)| {
                let mut s = 0.0;
                for i in a..b {
                    for j in a..b {
                        s += v[i] * v[j] * self.spec.noise.covariance(obs[i].time, obs[j].time);
                    }
                }
                s
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_matches_cohort_sizes() {
        let c = cohort_counts(&draw_cohorts(&DgpSpec::default()));
        assert_eq!(c[&2], 41);
        assert_eq!(c[&7], 45);
        assert_eq!(c.values().sum::<usize>(), 250);
    }

    #[test]
    fn ar1_draws_have_target_autocorrelation() {
        let noise = Noise::Ar1 { rho: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let (mut s00, mut s01, mut s02) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let e = noise.draw(&[1, 2, 3], &mut rng);
            s00 += e[0] * e[0];
            s01 += e[0] * e[1];
            s02 += e[0] * e[2];
        }
        let n = n as f64;
        assert!((s00 / n - 1.0).abs() < 0.05);
        assert!((s01 / n - 0.5).abs() < 0.05);
        assert!((s02 / n - 0.25).abs() < 0.05);
    }

    #[test]
    fn noise_free_mean() {
        let spec = DgpSpec {
            units: 3,
            anticipation: Some(0.5),
            ..DgpSpec::default()
        };
        let d = SimulatedDesign::new(&spec).unwrap();
        for (k, o) in d.panel.observations().iter().enumerate() {
            let e = d.event_dates[o.unit];
            let expected = -(e as f64)
                + 3.0 * o.time as f64
                + if o.time >= e { (o.time - e + 1) as f64 } else { 0.0 }
                + if o.time == e - 1 { 0.5 } else { 0.0 };
            assert_eq!(o.outcome, expected, "obs {k}");
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = DgpSpec {
            noise: Noise::Ar1 { rho: 1.0 },
            ..DgpSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = DgpSpec {
            first_period: -3,
            noise: Noise::Heteroskedastic,
            ..DgpSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
