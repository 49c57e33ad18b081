use thiserror::Error;

/// Errors raised by the estimation pipeline.
///
/// Each variant carries a stable [`Error::code`] so front ends can map
/// failures to machine-readable identifiers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate observation for unit {unit} at period {time}")]
    DuplicateObservation { unit: String, time: i64 },

    #[error("inconsistent event date for unit {unit}: {reason}")]
    InconsistentEventDate { unit: String, reason: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("malformed value in row {row}, column `{column}`: {value:?}")]
    MalformedValue {
        row: usize,
        column: String,
        value: String,
    },

    #[error("no observation for unit {unit} at period {time}")]
    UnknownObservation { unit: String, time: i64 },

    #[error("unknown unit `{0}`")]
    UnknownUnit(String),

    #[error("estimand `{0}` has empty support")]
    EmptySupport(String),

    #[error("dose missing or zero for unit {unit} at period {time}")]
    MissingDose { unit: String, time: i64 },

    #[error("estimand weight on untreated observation (unit {unit}, period {time})")]
    WeightOutsideTreated { unit: String, time: i64 },

    #[error("design is rank deficient after normalization (deficiency {deficiency}) in {groups:?}")]
    RankDeficientAfterNormalization { deficiency: usize, groups: Vec<String> },

    #[error("invalid treatment-effect model: {0}")]
    InvalidTreatmentModel(String),

    #[error("invalid outcome model: {0}")]
    InvalidOutcomeModel(String),

    #[error("estimand is not identified; unmatched directions: {}", .certificate.join(", "))]
    NotIdentified { certificate: Vec<String> },

    #[error("treatment-effect parameters are not identified (rank {rank} of {columns})")]
    ThetaNotIdentified { rank: usize, columns: usize },

    #[error("restricted-model weight system is singular")]
    SingularB1,

    #[error("alternating projections did not converge after {iterations} sweeps (last relative change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("least-squares problem has no rows or no columns")]
    EmptyDesign,

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("treatment indicator is collinear with the fixed effects")]
    CollinearTreatment,

    #[error("not enough pre-treatment periods for {leads} leads: {reason}")]
    InsufficientPreperiods { leads: usize, reason: String },

    #[error("cluster covariance of lead coefficients is singular")]
    SingularCovariance,

    #[error("leave-out variance undefined: group {group} has a single unit with non-zero weight")]
    LeaveOutUndefined { group: String },

    #[error("no control units for cohort {cohort} at period {period}")]
    EmptyControlGroup { cohort: i64, period: i64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Module-qualified identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateObservation { .. } => "panel.duplicate_observation",
            Error::InconsistentEventDate { .. } => "panel.inconsistent_event_date",
            Error::MissingColumn(_) => "panel.missing_column",
            Error::MalformedValue { .. } => "panel.malformed_value",
            Error::UnknownObservation { .. } => "panel.unknown_observation",
            Error::UnknownUnit(_) => "panel.unknown_unit",
            Error::EmptySupport(_) => "design.empty_support",
            Error::MissingDose { .. } => "design.missing_dose",
            Error::WeightOutsideTreated { .. } => "design.weight_outside_treated",
            Error::RankDeficientAfterNormalization { .. } => "design.rank_deficient",
            Error::InvalidTreatmentModel(_) => "design.invalid_treatment_model",
            Error::InvalidOutcomeModel(_) => "design.invalid_outcome_model",
            Error::NotIdentified { .. } => "estimator.not_identified",
            Error::ThetaNotIdentified { .. } => "estimator.theta_not_identified",
            Error::SingularB1 => "estimator.singular_b1",
            Error::NoConvergence { .. } => "lsq.no_convergence",
            Error::EmptyDesign => "lsq.empty_design",
            Error::SolverFailure(_) => "estimator.solver_failure",
            Error::CollinearTreatment => "weights.collinear_treatment",
            Error::InsufficientPreperiods { .. } => "inference.insufficient_preperiods",
            Error::SingularCovariance => "inference.singular_covariance",
            Error::LeaveOutUndefined { .. } => "inference.leave_out_undefined",
            Error::EmptyControlGroup { .. } => "benchmark.empty_control_group",
            Error::DimensionMismatch { .. } => "benchmark.dimension_mismatch",
            Error::InvalidSpec(_) => "benchmark.invalid_spec",
            Error::Csv(_) => "io.csv",
            Error::Io(_) => "io.io",
        }
    }

    /// True for statistical non-identification, as opposed to operational failure.
    pub fn is_identification_failure(&self) -> bool {
        matches!(
            self,
            Error::NotIdentified { .. } | Error::ThetaNotIdentified { .. } | Error::SingularB1
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
