use didimp_core::design::{OutcomeModelSpec, TreatmentEffectModel};
use didimp_core::inference::{PretestMode, PretestResult, TaubarMode};
use didimp_core::weights::Underidentification;
use serde::{Deserialize, Serialize};

/// Every warning code a report can carry.
pub const WARNING_CODES: &[&str] = &[
    // rows without an outcome were skipped
    "load.dropped_missing_outcome",
    // units treated in every observed period were dropped
    "load.dropped_always_treated",
    // model columns pinned to zero to restore full rank
    "design.rank_repair",
    // treated observations whose counterfactual is not identified (outside every estimand)
    "estimate.non_imputable_cells",
    // a unit has several weighted treated periods inside one averaging group
    "variance.taubar_not_minimizing",
    // an averaging group has zero total squared weight
    "variance.degenerate_denominator",
    // the variance could not be computed for this estimand
    "variance.unavailable",
    // the requested pre-test could not be run
    "pretest.unavailable",
    // static regression puts negative weight on some treated observations
    "ols.negative_weights",
    // the fully dynamic regression is not identified
    "ols.underidentified",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub code: String,
    pub message: String,
}

impl Warning {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        debug_assert!(WARNING_CODES.contains(&code), "undocumented warning code {code}");
        Warning {
            code: code.into(),
            message: message.into(),
        }
    }
}

/// Non-finite floats are written as the strings "inf", "-inf" and "nan" so
/// that reports survive a JSON round trip.
pub mod float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("not a number: {s}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub label: String,
    #[serde(with = "float")]
    pub estimate: f64,
    /// NaN when the variance is unavailable.
    #[serde(with = "float")]
    pub se: f64,
    /// Effective number of clusters, 1 / Σ_i(Σ_t |v_it|)².
    #[serde(with = "float")]
    pub n_h: f64,
    /// Treated observations with non-zero estimand weight.
    pub n_support: usize,
    pub taubar_mode: TaubarMode,
    pub leave_out: bool,
    /// Averaged effects used by the variance estimator.
    pub taubar: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretestSummary {
    pub mode: PretestMode,
    pub labels: Vec<String>,
    pub relative_times: Vec<Option<i64>>,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(with = "float")]
    pub stat: f64,
    pub df: (usize, Option<usize>),
    #[serde(with = "float")]
    pub p_value: f64,
}

impl From<&PretestResult> for PretestSummary {
    fn from(r: &PretestResult) -> Self {
        PretestSummary {
            mode: r.mode,
            labels: r.labels.clone(),
            relative_times: r.relative_times.clone(),
            coefficients: r.gamma_hat.clone(),
            se: (0..r.gamma_hat.len())
                .map(|j| r.cov_gamma[j][j].max(0.0).sqrt())
                .collect(),
            stat: r.stat,
            df: r.df,
            p_value: r.p_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Observations used.
    pub n: usize,
    pub n_untreated: usize,
    pub n_treated: usize,
    pub n_units: usize,
    pub outcome_model: OutcomeModelSpec,
    pub treatment_effect_model: TreatmentEffectModel,
    pub estimates: Vec<EstimateRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretest: Option<PretestSummary>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub estimand: String,
    pub unit: String,
    pub time: i64,
    pub treated: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsWeightRow {
    pub unit: String,
    pub time: i64,
    pub horizon: i64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsSummary {
    pub sum: f64,
    pub share_negative: f64,
    pub mass_negative: f64,
    pub by_horizon: Vec<(i64, f64)>,
    pub negative_cells: Vec<OlsWeightRow>,
    pub underidentification: Underidentification,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Effect,
    Pretrend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub relative_time: i64,
    pub coefficient: f64,
    pub se: f64,
    pub kind: PlotKind,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_values_round_trip() {
        let s = PretestSummary {
            mode: PretestMode::HomoskedasticF,
            labels: vec!["lead[-1]".into()],
            relative_times: vec![Some(-1)],
            coefficients: vec![0.1],
            se: vec![0.0],
            stat: f64::INFINITY,
            df: (1, Some(10)),
            p_value: 0.0,
        };
        let back: PretestSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
