use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::beta::beta_reg;

use crate::design::OutcomeModelSpec;
use crate::error::{Error, Result};
use crate::estimator::ImputationModel;
use crate::lsq::GramFactor;
use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretestMode {
    HomoskedasticF,
    ClusterWald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretestResult {
    pub labels: Vec<String>,
    /// Event time of each lead coefficient; `None` for user-supplied columns.
    pub relative_times: Vec<Option<i64>>,
    pub gamma_hat: Vec<f64>,
    pub cov_gamma: Vec<Vec<f64>>,
    pub stat: f64,
    /// Numerator and (for the F test) denominator degrees of freedom.
    pub df: (usize, Option<usize>),
    pub p_value: f64,
    pub mode: PretestMode,
}

/// Lead regression on the untreated observations, residualized once so it
/// can be rerun cheaply for many outcome vectors.
#[derive(Debug, Clone)]
pub struct PretestPlan {
    model: ImputationModel,
    labels: Vec<String>,
    relative_times: Vec<Option<i64>>,
    /// Residualized lead columns, one per coefficient, over Ω₀.
    w_tilde: Vec<Vec<f64>>,
    a_inv: DMatrix<f64>,
    a: DMatrix<f64>,
    w0: Vec<f64>,
    clusters: Vec<usize>,
    n_clusters: usize,
    dof: usize,
    n_params: usize,
}

/// min(4, longest pre-period run − 1).
pub fn default_leads(panel: &Panel) -> Result<usize> {
    let mut pre: HashMap<usize, usize> = HashMap::new();
    for k in 0..panel.len() {
        if panel.horizon_of(k).is_some_and(|h| h < 0) {
            *pre.entry(panel.obs(k).unit).or_insert(0) += 1;
        }
    }
    let longest = pre.values().copied().max().unwrap_or(0);
    if longest < 2 {
        return Err(Error::InsufficientPreperiods {
            leads: 0,
            reason: format!("longest pre-treatment run is {longest} periods"),
        });
    }
    Ok((longest - 1).min(4))
}

impl PretestPlan {
    pub fn new(panel: &Panel, spec: &OutcomeModelSpec, leads: usize) -> Result<Self> {
        Self::with_columns(panel, spec, leads, Vec::new())
    }

    /// Adds user-supplied columns (indexed by observation) to the `leads` indicators.
    pub fn with_columns(
        panel: &Panel,
        spec: &OutcomeModelSpec,
        leads: usize,
        extra: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        if leads == 0 && extra.is_empty() {
            return Err(Error::InsufficientPreperiods {
                leads: 0,
                reason: "no pre-trend coefficients requested".into(),
            });
        }
        let model = ImputationModel::new(panel, spec)?;
        let untreated = model.untreated().to_vec();
        let mut labels = Vec::new();
        let mut relative_times = Vec::new();
        let mut raw = Vec::new();
        for j in (1..=leads as i64).rev() {
            labels.push(format!("lead[-{j}]"));
            relative_times.push(Some(-j));
            raw.push(
                untreated
                    .iter()
                    .map(|&k| if panel.horizon_of(k) == Some(-j) { 1.0 } else { 0.0 })
                    .collect::<Vec<_>>(),
            );
        }
        for (name, col) in extra {
            if col.len() != panel.len() {
                return Err(Error::DimensionMismatch {
                    expected: panel.len(),
                    got: col.len(),
                });
            }
            labels.push(name);
            relative_times.push(None);
            raw.push(untreated.iter().map(|&k| col[k]).collect());
        }
        let q = raw.len();
        let w_tilde = raw
            .iter()
            .map(|c| model.residualize_untreated(c))
            .collect::<Result<Vec<_>>>()?;
        let w0 = model
            .untreated_weights()
            .map_or_else(|| vec![1.0; untreated.len()], |w| w.to_vec());
        let a = DMatrix::from_fn(q, q, |r, c| {
            w_tilde[r]
                .iter()
                .zip(&w_tilde[c])
                .zip(&w0)
                .map(|((x, y), w)| w * x * y)
                .sum()
        });
        let factor = GramFactor::new(&a);
        if !factor.is_full_rank() {
            return Err(Error::InsufficientPreperiods {
                leads,
                reason: format!(
                    "lead columns have rank {} of {q} after removing the outcome model",
                    factor.rank()
                ),
            });
        }
        let a_inv = factor.solve_matrix(&DMatrix::identity(q, q));
        let n_params = model.untreated_rank() + q;
        if untreated.len() <= n_params {
            return Err(Error::InsufficientPreperiods {
                leads,
                reason: format!(
                    "{} untreated observations for {n_params} parameters",
                    untreated.len()
                ),
            });
        }
        let mut ids: HashMap<usize, usize> = HashMap::new();
        let clusters: Vec<usize> = untreated
            .iter()
            .map(|&k| {
                let next = ids.len();
                *ids.entry(panel.obs(k).unit).or_insert(next)
            })
            .collect();
        Ok(PretestPlan {
            labels,
            relative_times,
            w_tilde,
            a_inv,
            a,
            w0,
            n_clusters: ids.len(),
            clusters,
            dof: untreated.len() - n_params,
            n_params,
            model,
        })
    }

    pub fn n_coefficients(&self) -> usize {
        self.labels.len()
    }

    /// Lead coefficients only, without a test statistic.
    pub fn gamma(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.estimate(y)?.0.iter().copied().collect())
    }

    fn estimate(&self, y: &[f64]) -> Result<(DVector<f64>, Vec<f64>)> {
        let resid = self.model.fit_outcomes(y)?.residuals;
        let q = self.n_coefficients();
        let rhs = DVector::from_fn(q, |j, _| {
            self.w_tilde[j]
                .iter()
                .zip(&resid)
                .zip(&self.w0)
                .map(|((x, e), w)| w * x * e)
                .sum()
        });
        let gamma = &self.a_inv * rhs;
        let e = resid
            .iter()
            .enumerate()
            .map(|(i, r)| r - (0..q).map(|j| self.w_tilde[j][i] * gamma[j]).sum::<f64>())
            .collect();
        Ok((gamma, e))
    }

    pub fn run(&self, y: &[f64], mode: PretestMode) -> Result<PretestResult> {
        let (gamma, e) = self.estimate(y)?;
        let q = self.n_coefficients();
        let (cov, stat, df, p_value) = match mode {
            PretestMode::HomoskedasticF => {
                let ssr: f64 = e.iter().zip(&self.w0).map(|(r, w)| w * r * r).sum();
                let num = (gamma.transpose() * &self.a * &gamma)[(0, 0)];
                let s2 = ssr / self.dof as f64;
                let scale = num.abs().max(ssr).max(1.0);
                let f = if num <= 1e-24 * scale {
                    0.0
                } else if ssr <= 1e-24 * scale {
                    f64::INFINITY
                } else {
                    num / (q as f64 * s2)
                };
                let d2 = self.dof as f64;
                let p = if f == 0.0 {
                    1.0
                } else if f.is_infinite() {
                    0.0
                } else {
                    beta_reg(d2 / 2.0, q as f64 / 2.0, d2 / (d2 + q as f64 * f))
                };
                (&self.a_inv * s2, f, (q, Some(self.dof)), p)
            }
            PretestMode::ClusterWald => {
                let mut scores = vec![DVector::<f64>::zeros(q); self.n_clusters];
                for (i, (&g, r)) in self.clusters.iter().zip(&e).enumerate() {
                    for j in 0..q {
                        scores[g][j] += self.w0[i] * self.w_tilde[j][i] * r;
                    }
                }
                let meat = scores
                    .iter()
                    .fold(DMatrix::zeros(q, q), |m, s| m + s * s.transpose());
                let g = self.n_clusters as f64;
                let n = self.w_tilde[0].len() as f64;
                let c = if self.n_clusters > 1 {
                    g / (g - 1.0) * (n - 1.0) / (n - self.n_params as f64)
                } else {
                    return Err(Error::SingularCovariance);
                };
                let v = &self.a_inv * meat * &self.a_inv * c;
                let vscale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let gscale = gamma.amax();
                if vscale <= 1e-24 && gscale <= 1e-12 {
                    (v, 0.0, (q, None), 1.0)
                } else {
                    let chol = v.clone().cholesky().ok_or(Error::SingularCovariance)?;
                    let stat = gamma.dot(&chol.solve(&gamma));
                    let p = ChiSquared::new(q as f64)
                        .map_err(|e| Error::SolverFailure(e.to_string()))?
                        .sf(stat);
                    (v, stat, (q, None), p)
                }
            }
        };
        Ok(PretestResult {
            labels: self.labels.clone(),
            relative_times: self.relative_times.clone(),
            gamma_hat: gamma.iter().copied().collect(),
            cov_gamma: (0..q).map(|r| cov.row(r).iter().copied().collect()).collect(),
            stat,
            df,
            p_value: p_value.clamp(0.0, 1.0),
            mode,
        })
    }
}

/// Lead test with `leads` indicators (default from [`default_leads`]).
pub fn pretest(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    leads: Option<usize>,
    mode: PretestMode,
) -> Result<PretestResult> {
    let k = match leads {
        Some(k) => k,
        None => default_leads(panel)?,
    };
    PretestPlan::new(panel, spec, k)?.run(&panel.outcomes(), mode)
}
