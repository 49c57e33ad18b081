//! Point estimation: the imputation path for unrestricted treatment effects
//! and the joint regression path for restricted effect models.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::design::{
    self, build_outcome_design, DesignMatrices, Estimability, EstimandWeights, OutcomeModelSpec,
    TreatmentEffectModel, ESTIMABILITY_TOL,
};
use crate::error::{Error, Result};
use crate::lsq::{self, GramFactor, LsqOptions, LsqProblem, Method, SparseDesign, SweepReport};
use crate::panel::Panel;

/// Designs with more columns than this use the iterative solvers by default.
pub const ITERATIVE_THRESHOLD: usize = 50_000;

#[derive(Debug, Clone)]
enum Backend {
    Dense {
        factor: GramFactor,
        /// Orthonormal basis of the null space of Z₀′ΩZ₀.
        null: Option<DMatrix<f64>>,
    },
    Iterative,
}

/// The untreated-outcome regression on Ω₀, set up once and reused for any
/// outcome vector or estimand on the same panel.
#[derive(Debug, Clone)]
pub struct ImputationModel {
    z: SparseDesign,
    pinned: Vec<String>,
    untreated: Vec<usize>,
    treated: Vec<usize>,
    z0: SparseDesign,
    w0: Option<Vec<f64>>,
    backend: Backend,
    imputable: Vec<bool>,
    opts: LsqOptions,
}

/// Fit of the untreated-outcome model for one outcome vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeFit {
    pub coefficients: Vec<f64>,
    /// Residuals on Ω₀, in the order of [`ImputationModel::untreated`].
    pub residuals: Vec<f64>,
    /// Ŷ(0) on Ω₁ in the order of [`ImputationModel::treated`]; `None` where not identified.
    pub y0_hat: Vec<Option<f64>>,
    pub convergence: SweepReport,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl ImputationModel {
    /// Uses the dense solver unless the design exceeds [`ITERATIVE_THRESHOLD`] columns.
    pub fn new(panel: &Panel, spec: &OutcomeModelSpec) -> Result<Self> {
        let mut opts = LsqOptions::default();
        if build_outcome_design(panel, spec)?.z.ncols() > ITERATIVE_THRESHOLD {
            opts.method = Method::Alternating;
        }
        Self::with_options(panel, spec, &opts)
    }

    pub fn with_options(panel: &Panel, spec: &OutcomeModelSpec, opts: &LsqOptions) -> Result<Self> {
        let od = build_outcome_design(panel, spec)?;
        let part = panel.partition();
        let z0 = od.z.select_rows(&part.untreated);
        let w0 = if panel.has_unit_weights() {
            None
        } else {
            let w = panel.weights();
            Some(part.untreated.iter().map(|&k| w[k]).collect::<Vec<_>>())
        };
        let iterative = opts.method == Method::Alternating;
        let (backend, imputable) = if iterative {
            let imputable = group_support(&z0, &od.z, &part.treated);
            (Backend::Iterative, imputable)
        } else {
            let factor = GramFactor::with_tol(&z0.gram(w0.as_deref()), opts.rank_tol);
            let ns = factor.null_space();
            let null = if ns.is_empty() {
                None
            } else {
                let m = DMatrix::from_columns(&ns.into_iter().map(DVector::from_vec).collect::<Vec<_>>());
                Some(m.qr().q())
            };
            let imputable = part
                .treated
                .iter()
                .map(|&k| match &null {
                    None => true,
                    Some(q) => {
                        let (c, v) = od.z.row(k);
                        let mut proj = DVector::zeros(q.ncols());
                        for (&cc, &vv) in c.iter().zip(v) {
                            proj += q.row(cc as usize).transpose() * vv;
                        }
                        proj.norm() <= ESTIMABILITY_TOL * norm(v)
                    }
                })
                .collect();
            (Backend::Dense { factor, null }, imputable)
        };
        Ok(ImputationModel {
            z: od.z,
            pinned: od.pinned,
            untreated: part.untreated,
            treated: part.treated,
            z0,
            w0,
            backend,
            imputable,
            opts: *opts,
        })
    }

    pub fn design(&self) -> &SparseDesign {
        &self.z
    }

    pub fn pinned(&self) -> &[String] {
        &self.pinned
    }

    pub fn untreated(&self) -> &[usize] {
        &self.untreated
    }

    pub fn treated(&self) -> &[usize] {
        &self.treated
    }

    pub fn nobs(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_iterative(&self) -> bool {
        matches!(self.backend, Backend::Iterative)
    }

    /// Observation weights on Ω₀, when they are not all one.
    pub fn untreated_weights(&self) -> Option<&[f64]> {
        self.w0.as_deref()
    }

    /// Rank of the untreated design: exact on the dense path, the number of
    /// columns with untreated support on the iterative path.
    pub fn untreated_rank(&self) -> usize {
        match &self.backend {
            Backend::Dense { factor, .. } => factor.rank(),
            Backend::Iterative => {
                let mut seen = vec![false; self.z0.ncols()];
                for i in 0..self.z0.nrows() {
                    for &c in self.z0.row(i).0 {
                        seen[c as usize] = true;
                    }
                }
                seen.into_iter().filter(|&s| s).count()
            }
        }
    }

    /// Residualizes a vector over Ω₀ (in [`ImputationModel::untreated`] order) on Z₀.
    pub fn residualize_untreated(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.backend {
            Backend::Dense { factor, .. } => {
                let c = factor.solve(&self.z0.t_mul(x, self.w0.as_deref()));
                Ok(x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi - self.z0.row_dot(i, &c))
                    .collect())
            }
            Backend::Iterative => {
                let mut problem = LsqProblem::new(&self.z0, x);
                problem.weights = self.w0.as_deref();
                Ok(lsq::solve(&problem, &self.opts)?.residuals)
            }
        }
    }

    /// Whether Ŷ(0) is identified for each treated observation.
    pub fn imputable(&self) -> &[bool] {
        &self.imputable
    }

    pub fn estimability(&self, w: &EstimandWeights) -> Result<Estimability> {
        let b = self.z.t_mul(&w.dense(self.nobs()), None);
        let scale = norm(&b);
        if scale == 0.0 {
            return Ok(Estimability::Identified);
        }
        let unmatched: Vec<f64> = match &self.backend {
            Backend::Dense { null: None, .. } => return Ok(Estimability::Identified),
            Backend::Dense { null: Some(q), .. } => {
                let bv = DVector::from_vec(b);
                (q * (q.transpose() * bv)).iter().copied().collect()
            }
            Backend::Iterative => {
                let (v0, _) =
                    crate::weights::solve_untreated_weights(&self.z0, self.w0.as_deref(), &b, &self.opts)?;
                let r = self.z0.t_mul(&v0, None);
                r.iter().zip(&b).map(|(x, y)| x + y).collect()
            }
        };
        if norm(&unmatched) <= ESTIMABILITY_TOL * scale {
            return Ok(Estimability::Identified);
        }
        let certificate = unmatched
            .iter()
            .enumerate()
            .filter(|(_, x)| x.abs() > ESTIMABILITY_TOL * scale)
            .map(|(j, _)| self.z.col_names()[j].clone())
            .collect();
        Ok(Estimability::NotIdentified { certificate })
    }

    fn require_identified(&self, w: &EstimandWeights) -> Result<()> {
        match self.estimability(w)? {
            Estimability::Identified => Ok(()),
            Estimability::NotIdentified { certificate } => Err(Error::NotIdentified { certificate }),
        }
    }

    /// Fits the untreated-outcome model to `y` (indexed by observation).
    pub fn fit_outcomes(&self, y: &[f64]) -> Result<OutcomeFit> {
        if y.len() != self.nobs() {
            return Err(Error::DimensionMismatch {
                expected: self.nobs(),
                got: y.len(),
            });
        }
        let y0: Vec<f64> = self.untreated.iter().map(|&k| y[k]).collect();
        let (coefficients, residuals, convergence) = match &self.backend {
            Backend::Dense { factor, .. } => {
                let coef = factor.solve(&self.z0.t_mul(&y0, self.w0.as_deref()));
                let resid = y0
                    .iter()
                    .enumerate()
                    .map(|(i, yi)| yi - self.z0.row_dot(i, &coef))
                    .collect();
                let conv = SweepReport {
                    sweeps: 0,
                    last_change: 0.0,
                    converged: true,
                    ssr_history: Vec::new(),
                };
                (coef, resid, conv)
            }
            Backend::Iterative => {
                let mut problem = LsqProblem::new(&self.z0, &y0);
                problem.weights = self.w0.as_deref();
                let s = lsq::solve(&problem, &self.opts)?;
                (s.coefficients, s.residuals, s.convergence)
            }
        };
        let y0_hat = self
            .treated
            .iter()
            .zip(&self.imputable)
            .map(|(&k, &ok)| ok.then(|| self.z.row_dot(k, &coefficients)))
            .collect();
        Ok(OutcomeFit {
            coefficients,
            residuals,
            y0_hat,
            convergence,
        })
    }

    /// Implied weights v over all observations, with τ̂_w = v′Y.
    pub fn implied_weights(&self, w: &EstimandWeights) -> Result<Vec<f64>> {
        self.require_identified(w)?;
        let n = self.nobs();
        let wd = w.dense(n);
        let b = self.z.t_mul(&wd, None);
        let v0 = match &self.backend {
            Backend::Dense { factor, .. } => {
                let x = factor.solve(&b);
                (0..self.untreated.len())
                    .map(|i| -self.w0.as_ref().map_or(1.0, |w| w[i]) * self.z0.row_dot(i, &x))
                    .collect()
            }
            Backend::Iterative => {
                crate::weights::solve_untreated_weights(&self.z0, self.w0.as_deref(), &b, &self.opts)?.0
            }
        };
        let mut v = wd;
        for (&k, x) in self.untreated.iter().zip(v0) {
            v[k] = x;
        }
        Ok(v)
    }

    /// Imputation fit of `y` for estimand `w`.
    pub fn fit(&self, y: &[f64], w: &EstimandWeights) -> Result<FitResult> {
        self.require_identified(w)?;
        let of = self.fit_outcomes(y)?;
        let mut tau_hat = BTreeMap::new();
        let mut y0_hat = BTreeMap::new();
        let mut non_imputable = Vec::new();
        for (pos, &k) in self.treated.iter().enumerate() {
            match of.y0_hat[pos] {
                Some(f) => {
                    y0_hat.insert(k, f);
                    if w.get(k) != 0.0 {
                        tau_hat.insert(k, y[k] - f);
                    }
                }
                None => non_imputable.push(k),
            }
        }
        let mut tau_w = 0.0;
        for (&k, &wk) in &w.weights {
            if wk == 0.0 {
                continue;
            }
            match tau_hat.get(&k) {
                Some(t) => tau_w += wk * t,
                None => {
                    return Err(Error::NotIdentified {
                        certificate: vec![format!("observation {k}")],
                    })
                }
            }
        }
        Ok(FitResult {
            coef_names: self.z.col_names().to_vec(),
            coefficients: of.coefficients,
            tau_hat,
            y0_hat,
            residuals: self.untreated.iter().copied().zip(of.residuals).collect(),
            tau_w,
            theta: None,
            non_imputable,
        })
    }
}

/// For the iterative backend: a treated row is imputable when every
/// absorbed group it touches has untreated support.
fn group_support(z0: &SparseDesign, z: &SparseDesign, treated: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; z.ncols()];
    for i in 0..z0.nrows() {
        for &c in z0.row(i).0 {
            seen[c as usize] = true;
        }
    }
    treated
        .iter()
        .map(|&k| z.row(k).0.iter().all(|&c| seen[c as usize]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coef_names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// τ̂ on the support of the estimand weights.
    pub tau_hat: BTreeMap<usize, f64>,
    /// Ŷ(0) on every treated observation where it is identified.
    pub y0_hat: BTreeMap<usize, f64>,
    /// Untreated-model residuals on Ω₀.
    pub residuals: BTreeMap<usize, f64>,
    pub tau_w: f64,
    pub theta: Option<Vec<(String, f64)>>,
    /// Treated observations whose Ŷ(0) is not identified.
    pub non_imputable: Vec<usize>,
}

pub fn fit_imputation(panel: &Panel, spec: &OutcomeModelSpec, w: &EstimandWeights) -> Result<FitResult> {
    ImputationModel::new(panel, spec)?.fit(&panel.outcomes(), w)
}

/// OLS of Y on [Z, DΓ] over all observations, solved through the
/// residualized treatment columns G̃ = M_Z DΓ.
#[derive(Debug, Clone)]
pub struct JointModel {
    dm: DesignMatrices,
    weights: Option<Vec<f64>>,
    zfactor: GramFactor,
    g: DMatrix<f64>,
    gtil: DMatrix<f64>,
    hfactor: GramFactor,
}

impl JointModel {
    pub fn new(panel: &Panel, spec: &OutcomeModelSpec, tem: &TreatmentEffectModel) -> Result<Self> {
        let dm = design::assemble(panel, spec, tem)?;
        let weights = (!panel.has_unit_weights()).then(|| panel.weights());
        let wts = weights.as_deref();
        let zfactor = GramFactor::new(&dm.z.gram(wts));
        let g = dm.d_gamma();
        let mut gtil = g.clone();
        for j in 0..g.ncols() {
            let col: Vec<f64> = g.column(j).iter().copied().collect();
            let c = zfactor.solve(&dm.z.t_mul(&col, wts));
            let fit = dm.z.mul(&c);
            for (i, f) in fit.into_iter().enumerate() {
                gtil[(i, j)] -= f;
            }
        }
        let wg = weighted_rows(&gtil, wts);
        let hfactor = GramFactor::new(&(gtil.transpose() * &wg));
        if !hfactor.is_full_rank() {
            return Err(Error::ThetaNotIdentified {
                rank: hfactor.rank(),
                columns: hfactor.dim(),
            });
        }
        Ok(JointModel {
            dm,
            weights,
            zfactor,
            g,
            gtil,
            hfactor,
        })
    }

    pub fn design(&self) -> &DesignMatrices {
        &self.dm
    }

    fn gamma_t_w(&self, w: &EstimandWeights) -> Vec<f64> {
        let w1: Vec<f64> = self.dm.treated.iter().map(|&k| w.get(k)).collect();
        (self.dm.gamma.transpose() * DVector::from_vec(w1))
            .iter()
            .copied()
            .collect()
    }

    pub fn theta(&self, y: &[f64]) -> Vec<f64> {
        let wy: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(i, v)| self.weights.as_ref().map_or(1.0, |w| w[i]) * v)
            .collect();
        let rhs = self.gtil.transpose() * DVector::from_vec(wy);
        self.hfactor.solve(rhs.as_slice())
    }

    pub fn fit(&self, y: &[f64], w: &EstimandWeights) -> Result<FitResult> {
        let n = self.dm.z.nrows();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        let theta = self.theta(y);
        let gt = &self.g * DVector::from_column_slice(&theta);
        let ypart: Vec<f64> = y.iter().zip(gt.iter()).map(|(a, b)| a - b).collect();
        let coefficients = self
            .zfactor
            .solve(&self.dm.z.t_mul(&ypart, self.weights.as_deref()));
        let tau = &self.dm.gamma * DVector::from_column_slice(&theta);
        let mut tau_hat = BTreeMap::new();
        let mut y0_hat = BTreeMap::new();
        let mut tau_w = 0.0;
        for (r, &k) in self.dm.treated.iter().enumerate() {
            y0_hat.insert(k, self.dm.z.row_dot(k, &coefficients));
            let wk = w.get(k);
            if wk != 0.0 {
                tau_hat.insert(k, tau[r]);
                tau_w += wk * tau[r];
            }
        }
        let residuals = self
            .dm
            .untreated
            .iter()
            .map(|&k| (k, y[k] - self.dm.z.row_dot(k, &coefficients)))
            .collect();
        Ok(FitResult {
            coef_names: self.dm.z.col_names().to_vec(),
            coefficients,
            tau_hat,
            y0_hat,
            residuals,
            tau_w,
            theta: Some(self.dm.theta_names.iter().cloned().zip(theta).collect()),
            non_imputable: Vec::new(),
        })
    }

    /// Implied weights v = ΩG̃(G̃′ΩG̃)⁻¹Γ′w₁ over all observations.
    pub fn implied_weights(&self, w: &EstimandWeights) -> Vec<f64> {
        let a = self.hfactor.solve(&self.gamma_t_w(w));
        let v = &self.gtil * DVector::from_vec(a);
        v.iter()
            .enumerate()
            .map(|(i, x)| self.weights.as_ref().map_or(1.0, |w| w[i]) * x)
            .collect()
    }

    /// The implied weights restricted to treated observations.
    pub fn adjusted_weights(&self, w: &EstimandWeights) -> EstimandWeights {
        let v = self.implied_weights(w);
        EstimandWeights::new(
            format!("{}_adjusted", w.label),
            self.dm.treated.iter().map(|&k| (k, v[k])).collect(),
        )
    }
}

fn weighted_rows(m: &DMatrix<f64>, w: Option<&[f64]>) -> DMatrix<f64> {
    match w {
        None => m.clone(),
        Some(w) => DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| w[i] * m[(i, j)]),
    }
}

pub fn fit_joint(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    tem: &TreatmentEffectModel,
    w: &EstimandWeights,
) -> Result<FitResult> {
    JointModel::new(panel, spec, tem)?.fit(&panel.outcomes(), w)
}

/// Weights w̃* on Ω₁ such that the imputation estimator with w̃* equals the
/// restricted-model estimator for w.
pub fn adjusted_weights(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    tem: &TreatmentEffectModel,
    w: &EstimandWeights,
) -> Result<EstimandWeights> {
    if tem.is_unrestricted() {
        return Ok(w.clone());
    }
    match JointModel::new(panel, spec, tem) {
        Ok(m) => Ok(m.adjusted_weights(w)),
        Err(Error::ThetaNotIdentified { .. }) => Err(Error::SingularB1),
        Err(e) => Err(e),
    }
}
