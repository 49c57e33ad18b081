//! Conservative clustered standard errors and pre-trend tests.

mod pretest;
mod variance;

pub use pretest::{default_leads, pretest, PretestMode, PretestPlan, PretestResult};
pub use variance::{
    conservative_se, covariance_matrix, unit_scores, SeResult, TaubarMode, UnitScores, VarianceSpec,
    MIN_CELL_UNITS,
};
