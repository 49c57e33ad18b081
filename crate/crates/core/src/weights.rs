//! Implied observation weights of linear estimators and diagnostics for
//! two-way fixed-effects regressions.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{EstimandWeights, OutcomeModelSpec, TreatmentEffectModel};
use crate::error::{Error, Result};
use crate::estimator::{ImputationModel, JointModel, ITERATIVE_THRESHOLD};
use crate::lsq::alternating::BlockIndex;
use crate::lsq::{self, LsqOptions, LsqProblem, Method, SparseDesign, SweepReport};
use crate::panel::Panel;

/// Weights below this magnitude count as zero in sign statistics.
pub const SIGN_TOL: f64 = 1e-12;

/// Per-observation weights v with τ̂ = v′Y, plus concentration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpliedWeights {
    /// One weight per observation, in panel order.
    pub v: Vec<f64>,
    /// Σ_i (Σ_t |v_it|)².
    pub herfindahl: f64,
    /// 1 / herfindahl.
    pub n_h: f64,
    pub sum_treated: f64,
    pub sum_untreated: f64,
}

impl ImpliedWeights {
    pub fn from_vector(panel: &Panel, v: Vec<f64>) -> Self {
        let mut per_unit = vec![0.0; panel.n_units()];
        let (mut sum_treated, mut sum_untreated) = (0.0, 0.0);
        for (k, o) in panel.observations().iter().enumerate() {
            per_unit[o.unit] += v[k].abs();
            if panel.is_treated(k) {
                sum_treated += v[k];
            } else {
                sum_untreated += v[k];
            }
        }
        let herfindahl: f64 = per_unit.iter().map(|a| a * a).sum();
        ImpliedWeights {
            v,
            herfindahl,
            n_h: if herfindahl > 0.0 {
                1.0 / herfindahl
            } else {
                f64::INFINITY
            },
            sum_treated,
            sum_untreated,
        }
    }

    /// v′y.
    pub fn apply(&self, y: &[f64]) -> f64 {
        self.v.iter().zip(y).map(|(a, b)| a * b).sum()
    }
}

/// Weights from the explicit formula: v₀ = −ΩZ₀(Z₀′ΩZ₀)⁻Z₁′w₁ and v₁ = w₁
/// for unrestricted effects, or v = ΩG̃(G̃′ΩG̃)⁻¹Γ′w₁ for a restricted model.
pub fn implied_weights_closed(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    w: &EstimandWeights,
    tem: &TreatmentEffectModel,
) -> Result<ImpliedWeights> {
    let v = if tem.is_unrestricted() {
        ImputationModel::with_options(panel, spec, &LsqOptions::default())?.implied_weights(w)?
    } else {
        JointModel::new(panel, spec, tem)?.implied_weights(w)
    };
    Ok(ImpliedWeights::from_vector(panel, v))
}

/// Weights for unrestricted effects by block Gauss–Seidel on Z₀′ΩZ₀ψ = −Z₁′w₁,
/// one fixed-effect group at a time, without forming Z₀′ΩZ₀.
pub fn implied_weights_iterative(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    w: &EstimandWeights,
) -> Result<ImpliedWeights> {
    let model = ImputationModel::with_options(panel, spec, &LsqOptions::alternating())?;
    Ok(ImpliedWeights::from_vector(panel, model.implied_weights(w)?))
}

/// Picks the closed form for small designs and the iterative path above
/// [`ITERATIVE_THRESHOLD`] columns.
pub fn implied_weights(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    w: &EstimandWeights,
    tem: &TreatmentEffectModel,
) -> Result<ImpliedWeights> {
    if tem.is_unrestricted() {
        let v = ImputationModel::new(panel, spec)?.implied_weights(w)?;
        Ok(ImpliedWeights::from_vector(panel, v))
    } else {
        implied_weights_closed(panel, spec, w, tem)
    }
}

/// Solves Z₀′ΩZ₀ψ = −b by cycling over the design blocks and returns
/// v₀ = ΩZ₀ψ on the rows of `z0`.
pub(crate) fn solve_untreated_weights(
    z0: &SparseDesign,
    w0: Option<&[f64]>,
    b: &[f64],
    opts: &LsqOptions,
) -> Result<(Vec<f64>, SweepReport)> {
    let blocks: Vec<BlockIndex> = z0.blocks().iter().map(|bl| BlockIndex::new(z0, bl, w0)).collect();
    let offsets: Vec<Vec<f64>> = z0
        .blocks()
        .iter()
        .map(|bl| b[bl.start..bl.end()].iter().map(|x| -x).collect())
        .collect();
    // x = −Z₀ψ
    let mut x = vec![0.0; z0.nrows()];
    let mut prev = x.clone();
    let mut report = SweepReport {
        sweeps: 0,
        last_change: 0.0,
        converged: false,
        ssr_history: Vec::new(),
    };
    while report.sweeps < opts.max_sweeps {
        for (bl, off) in blocks.iter().zip(&offsets) {
            bl.sweep_with_offset(&mut x, w0, Some(off));
        }
        report.sweeps += 1;
        let scale = match x.iter().fold(0.0f64, |m, v| m.max(v.abs())) {
            s if s > 0.0 => s,
            _ => 1.0,
        };
        let change = x.iter().zip(&prev).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        report.last_change = change / scale;
        if change <= opts.tol * scale || blocks.len() == 1 {
            report.converged = true;
            break;
        }
        prev.copy_from_slice(&x);
    }
    if !report.converged {
        return Err(Error::NoConvergence {
            iterations: report.sweeps,
            last_change: report.last_change,
        });
    }
    let v0 = x
        .iter()
        .enumerate()
        .map(|(i, xi)| -w0.map_or(1.0, |w| w[i]) * xi)
        .collect();
    Ok((v0, report))
}

/// Weights that a static two-way fixed-effects regression puts on treated observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsWeightReport {
    /// (observation, weight) over treated observations.
    pub weights: Vec<(usize, f64)>,
    pub sum: f64,
    pub share_negative: f64,
    pub mass_negative: f64,
    /// Total weight per horizon.
    pub by_horizon: BTreeMap<i64, f64>,
}

/// w_it = D̃_it / Σ D̃², with D̃ the treatment indicator residualized on unit
/// and period fixed effects over all observations.
pub fn static_ols_weights(panel: &Panel) -> Result<OlsWeightReport> {
    let spec = OutcomeModelSpec::twfe();
    let z = crate::design::build_outcome_design(panel, &spec)?.z;
    let d: Vec<f64> = (0..panel.len())
        .map(|k| if panel.is_treated(k) { 1.0 } else { 0.0 })
        .collect();
    let ow = (!panel.has_unit_weights()).then(|| panel.weights());
    let mut opts = LsqOptions::default();
    if z.ncols() > ITERATIVE_THRESHOLD {
        opts.method = Method::Alternating;
    }
    let mut problem = LsqProblem::new(&z, &d);
    problem.weights = ow.as_deref();
    let dtil = lsq::solve(&problem, &opts)?.residuals;
    let wt = |k: usize| ow.as_ref().map_or(1.0, |w| w[k]);
    let ss: f64 = dtil.iter().enumerate().map(|(k, x)| wt(k) * x * x).sum();
    let n1: f64 = d.iter().enumerate().map(|(k, x)| wt(k) * x).sum();
    if n1 == 0.0 || ss <= 1e-10 * n1 {
        return Err(Error::CollinearTreatment);
    }
    let mut weights = Vec::new();
    let mut by_horizon = BTreeMap::new();
    let (mut sum, mut neg, mut mass) = (0.0, 0usize, 0.0);
    for k in (0..panel.len()).filter(|&k| panel.is_treated(k)) {
        let x = wt(k) * dtil[k] / ss;
        weights.push((k, x));
        sum += x;
        if x < -SIGN_TOL {
            neg += 1;
            mass += x;
        }
        *by_horizon.entry(panel.horizon_of(k).unwrap()).or_insert(0.0) += x;
    }
    Ok(OlsWeightReport {
        share_negative: neg as f64 / weights.len() as f64,
        weights,
        sum,
        mass_negative: mass,
        by_horizon,
    })
}

/// Layout of a fully dynamic event-study regression: one dummy per relative
/// time, except the excluded reference horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicSpec {
    pub exclude: Vec<i64>,
}

impl Default for DynamicSpec {
    fn default() -> Self {
        DynamicSpec { exclude: vec![-1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Underidentification {
    Ok,
    Deficient {
        dim: usize,
        /// Relative-time part of a null direction, scaled to unit max-norm.
        witness: Vec<(i64, f64)>,
        /// The full null direction over all columns, with the same scaling.
        direction: Vec<(String, f64)>,
    },
}

/// Relative singular-value threshold for the null space of the dynamic design.
const NULL_TOL: f64 = 1e-8;

pub fn detect_underidentification(panel: &Panel, spec: &DynamicSpec) -> Result<Underidentification> {
    let base = crate::design::build_outcome_design(panel, &OutcomeModelSpec::twfe())?.z;
    let mut rel: Vec<i64> = (0..panel.len())
        .filter_map(|k| panel.horizon_of(k))
        .filter(|h| !spec.exclude.contains(h))
        .collect();
    rel.sort_unstable();
    rel.dedup();
    let p0 = base.ncols();
    let p = p0 + rel.len();
    let n = panel.len().max(p);
    let mut x = DMatrix::zeros(n, p);
    for k in 0..panel.len() {
        let (c, v) = base.row(k);
        for (&cc, &vv) in c.iter().zip(v) {
            x[(k, cc as usize)] = vv;
        }
        if let Some(j) = panel.horizon_of(k).and_then(|h| rel.binary_search(&h).ok()) {
            x[(k, p0 + j)] = 1.0;
        }
    }
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let s = x.column(j).norm();
            if s > 0.0 {
                1.0 / s
            } else {
                1.0
            }
        })
        .collect();
    for j in 0..p {
        x.column_mut(j).scale_mut(scale[j]);
    }
    let svd = x.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::SolverFailure("singular value decomposition failed".into()))?;
    let smax = svd.singular_values.max();
    let null: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= NULL_TOL * smax)
        .collect();
    if null.is_empty() {
        return Ok(Underidentification::Ok);
    }
    let basis: Vec<Vec<f64>> = null
        .iter()
        .map(|&r| (0..p).map(|j| vt[(r, j)] * scale[j]).collect())
        .collect();
    let dir = trend_direction(&basis, p0, &rel).unwrap_or_else(|| basis[0].clone());
    let tau = &dir[p0..];
    let (mut top, mut at) = (0.0f64, 0);
    for (j, t) in tau.iter().enumerate() {
        if t.abs() > top {
            top = t.abs();
            at = j;
        }
    }
    let norm = if top > 0.0 { top * tau[at].signum() } else { 1.0 };
    let mut names: Vec<String> = base.col_names().to_vec();
    names.extend(rel.iter().map(|h| format!("tau[{h}]")));
    Ok(Underidentification::Deficient {
        dim: null.len(),
        witness: rel.iter().zip(tau).map(|(&h, t)| (h, t / norm)).collect(),
        direction: names.into_iter().zip(&dir).map(|(s, d)| (s, d / norm)).collect(),
    })
}

/// The null direction whose relative-time part is proportional to h + 1,
/// when the null space contains one.
fn trend_direction(basis: &[Vec<f64>], p0: usize, rel: &[i64]) -> Option<Vec<f64>> {
    let d = basis.len();
    let m = rel.len();
    let t = DMatrix::from_fn(m, d, |i, j| basis[j][p0 + i]);
    let target = nalgebra::DVector::from_iterator(m, rel.iter().map(|&h| (h + 1) as f64));
    let c = t.clone().svd(true, true).solve(&target, 1e-12).ok()?;
    let resid = (&t * &c - &target).norm();
    if resid > 1e-8 * target.norm() {
        return None;
    }
    let full = (0..basis[0].len())
        .map(|j| (0..d).map(|k| c[k] * basis[k][j]).sum())
        .collect();
    Some(full)
}
