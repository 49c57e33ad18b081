use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use didimp_core::benchmark::DgpSpec;
use didimp_core::design::{CommonBlock, EstimandSpec, OutcomeModelSpec, TreatmentEffectModel, UnitBlock};
use didimp_core::inference::{PretestMode, VarianceSpec};
use didimp_core::panel::{ColumnSchema, EventSource};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Where the panel comes from and how its columns are named.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub time: Option<String>,
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub event_time: Option<String>,
    #[serde(default)]
    pub treated: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub dose: Option<String>,
}

/// An estimand with an optional user label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEstimand {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub spec: EstimandSpec,
}

impl NamedEstimand {
    pub fn new(spec: EstimandSpec) -> Self {
        NamedEstimand { label: None, spec }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.spec.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretestConfig {
    /// Number of lead indicators; chosen from the data when absent.
    #[serde(default)]
    pub leads: Option<usize>,
    #[serde(default = "default_mode")]
    pub mode: PretestMode,
    /// Extra regressors read from these input columns.
    #[serde(default)]
    pub extra_columns: Vec<String>,
}

fn default_mode() -> PretestMode {
    PretestMode::HomoskedasticF
}

impl Default for PretestConfig {
    fn default() -> Self {
        PretestConfig {
            leads: None,
            mode: default_mode(),
            extra_columns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Per-observation τ̂ CSV written by `estimate`.
    #[serde(default)]
    pub tau_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub outcome_model: OutcomeModelSpec,
    #[serde(default)]
    pub treatment_effect_model: TreatmentEffectModel,
    /// Defaults to the overall ATT.
    #[serde(default)]
    pub estimands: Vec<NamedEstimand>,
    /// Chosen per estimand from the data when absent.
    #[serde(default)]
    pub variance: Option<VarianceSpec>,
    #[serde(default)]
    pub pretest: Option<PretestConfig>,
    #[serde(default)]
    pub simulation: Option<DgpSpec>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn estimands(&self) -> Vec<NamedEstimand> {
        if self.estimands.is_empty() {
            vec![NamedEstimand::new(EstimandSpec::Att)]
        } else {
            self.estimands.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.estimands {
            let l = e.label();
            if !seen.insert(l.clone()) {
                return Err(CliError::Config(format!("duplicate estimand label `{l}`")));
            }
        }
        if self.input.event_time.is_some() && self.input.treated.is_some() {
            return Err(CliError::Config(
                "give either event_time or treated, not both".into(),
            ));
        }
        Ok(())
    }

    /// Column mapping for the input CSV. Covariates referenced by the outcome
    /// model or the pre-test are added so that loading fails if they are absent.
    pub fn schema(&self) -> Result<ColumnSchema> {
        let i = &self.input;
        let event = match (&i.event_time, &i.treated) {
            (Some(c), None) => EventSource::EventTime(c.clone()),
            (None, Some(c)) => EventSource::Treated(c.clone()),
            (None, None) => {
                return Err(CliError::Config(
                    "no event column: set --event-time or --treated".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give either event_time or treated, not both".into(),
                ))
            }
        };
        let mut schema = ColumnSchema::new(
            i.unit.as_deref().unwrap_or("unit"),
            i.time.as_deref().unwrap_or("time"),
            i.outcome.as_deref().unwrap_or("y"),
            event,
        );
        let mut covs = i.covariates.clone();
        for name in self.referenced_covariates() {
            if !covs.contains(&name) {
                covs.push(name);
            }
        }
        schema.covariates = covs;
        schema.weight = i.weight.clone();
        schema.dose = i.dose.clone();
        Ok(schema)
    }

    fn referenced_covariates(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.outcome_model.unit_blocks {
            if let UnitBlock::Covariate { name } = b {
                out.push(name.clone());
            }
        }
        for b in &self.outcome_model.common_blocks {
            match b {
                CommonBlock::GroupFe { column } => out.push(column.clone()),
                CommonBlock::Covariates { names } => out.extend(names.iter().cloned()),
                _ => {}
            }
        }
        if let Some(p) = &self.pretest {
            out.extend(p.extra_columns.iter().cloned());
        }
        out
    }
}
