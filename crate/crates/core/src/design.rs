//! Regression designs for untreated outcomes and treatment effects.
//!
//! An [`OutcomeModelSpec`] lists per-unit regressors (unit fixed effects,
//! unit trends, unit-interacted covariates) and shared regressors (period or
//! group fixed effects, covariates, lead indicators). Materialized designs
//! cover every observation of the panel in panel order, with columns laid
//! out as unit blocks, then common blocks, then treatment-effect columns.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{Block, GramFactor, RankReport, SparseDesign, DEFAULT_RANK_TOL};
use crate::panel::{EventDate, Panel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UnitBlock {
    /// Unit fixed effect.
    Intercept,
    /// Unit-specific linear trend in the period.
    Trend,
    /// Unit-specific slope on a covariate.
    Covariate { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CommonBlock {
    PeriodFe,
    /// Fixed effects for the integer codes of a covariate column.
    GroupFe {
        column: String,
    },
    Covariates {
        names: Vec<String>,
    },
    /// Indicators for relative times K < 0, except those listed.
    Leads {
        #[serde(default = "default_lead_exclusions")]
        exclude: Vec<i64>,
    },
}

fn default_lead_exclusions() -> Vec<i64> {
    vec![-1]
}

/// Which level of a categorical block is pinned to zero when another
/// intercept-like block is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    First,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModelSpec {
    #[serde(default)]
    pub unit_blocks: Vec<UnitBlock>,
    #[serde(default)]
    pub common_blocks: Vec<CommonBlock>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl OutcomeModelSpec {
    /// Unit and period fixed effects.
    pub fn twfe() -> Self {
        OutcomeModelSpec {
            unit_blocks: vec![UnitBlock::Intercept],
            common_blocks: vec![CommonBlock::PeriodFe],
            normalization: Normalization::First,
        }
    }

    pub fn with_common(mut self, block: CommonBlock) -> Self {
        self.common_blocks.push(block);
        self
    }

    pub fn with_unit(mut self, block: UnitBlock) -> Self {
        self.unit_blocks.push(block);
        self
    }
}

impl Default for OutcomeModelSpec {
    fn default() -> Self {
        Self::twfe()
    }
}

/// A value attached to one (unit, period) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    pub unit: String,
    pub time: i64,
    pub value: f64,
}

impl CellValue {
    pub fn new(unit: impl Into<String>, time: i64, value: f64) -> Self {
        CellValue {
            unit: unit.into(),
            time,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaColumn {
    pub name: String,
    pub cells: Vec<CellValue>,
}

/// Model for the treatment effects τ = Γθ of treated observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreatmentEffectModel {
    #[default]
    Unrestricted,
    Constant,
    /// One effect per horizon; horizons at or above `cap` share one effect.
    ByHorizon {
        #[serde(default)]
        cap: Option<i64>,
    },
    ByCohort,
    /// Explicit Γ columns; cells not listed are zero.
    Custom {
        columns: Vec<GammaColumn>,
    },
    /// Linear restrictions Bτ = 0, one row per restriction.
    Restriction {
        rows: Vec<Vec<CellValue>>,
    },
}

impl TreatmentEffectModel {
    pub fn is_unrestricted(&self) -> bool {
        matches!(self, TreatmentEffectModel::Unrestricted)
    }
}

/// Estimand weights on treated observations, keyed by observation index.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimandWeights {
    pub label: String,
    pub weights: BTreeMap<usize, f64>,
}

impl EstimandWeights {
    pub fn new(label: impl Into<String>, weights: BTreeMap<usize, f64>) -> Self {
        EstimandWeights {
            label: label.into(),
            weights,
        }
    }

    /// Dense weight vector over all `n` observations.
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut w = vec![0.0; n];
        for (&k, &v) in &self.weights {
            w[k] = v;
        }
        w
    }

    pub fn sum(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn get(&self, k: usize) -> f64 {
        self.weights.get(&k).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.weights.values().all(|&v| v == 0.0)
    }

    /// Weights keyed by unit label and period.
    pub fn cells(&self, panel: &Panel) -> Vec<CellValue> {
        self.weights
            .iter()
            .map(|(&k, &v)| {
                let o = panel.obs(k);
                CellValue::new(panel.unit_key(o.unit), o.time, v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimandSpec {
    Att,
    Horizon {
        h: i64,
    },
    /// Horizon `h`, restricted to units observed at every horizon in `require`.
    BalancedHorizon {
        h: i64,
        require: Vec<i64>,
    },
    Cohort {
        e: i64,
    },
    Difference {
        a: Box<EstimandSpec>,
        b: Box<EstimandSpec>,
    },
    /// With `normalize`, averages effects per unit of dose; otherwise sums effects.
    PerDose {
        #[serde(default = "yes")]
        normalize: bool,
    },
    Custom {
        weights: Vec<CellValue>,
    },
}

fn yes() -> bool {
    true
}

impl EstimandSpec {
    pub fn label(&self) -> String {
        match self {
            EstimandSpec::Att => "att".into(),
            EstimandSpec::Horizon { h } => format!("h{h}"),
            EstimandSpec::BalancedHorizon { h, .. } => format!("h{h}_balanced"),
            EstimandSpec::Cohort { e } => format!("cohort{e}"),
            EstimandSpec::Difference { a, b } => format!("{}-{}", a.label(), b.label()),
            EstimandSpec::PerDose { normalize: true } => "per_dose".into(),
            EstimandSpec::PerDose { normalize: false } => "total".into(),
            EstimandSpec::Custom { .. } => "custom".into(),
        }
    }
}

fn uniform(label: String, cells: Vec<usize>) -> Result<EstimandWeights> {
    if cells.is_empty() {
        return Err(Error::EmptySupport(label));
    }
    let w = 1.0 / cells.len() as f64;
    Ok(EstimandWeights::new(
        label,
        cells.into_iter().map(|k| (k, w)).collect(),
    ))
}

pub fn build_estimand(panel: &Panel, spec: &EstimandSpec) -> Result<EstimandWeights> {
    let label = spec.label();
    let treated: Vec<usize> = (0..panel.len()).filter(|&k| panel.is_treated(k)).collect();
    match spec {
        EstimandSpec::Att => uniform(label, treated),
        EstimandSpec::Horizon { h } => uniform(
            label,
            treated
                .into_iter()
                .filter(|&k| panel.horizon_of(k) == Some(*h))
                .collect(),
        ),
        EstimandSpec::BalancedHorizon { h, require } => {
            let keep = |k: usize| {
                let o = panel.obs(k);
                let e = panel.event_date(o.unit).finite().expect("treated unit");
                require.iter().all(|r| panel.find(o.unit, e + r).is_some())
            };
            uniform(
                label,
                treated
                    .into_iter()
                    .filter(|&k| panel.horizon_of(k) == Some(*h) && keep(k))
                    .collect(),
            )
        }
        EstimandSpec::Cohort { e } => uniform(
            label,
            treated
                .into_iter()
                .filter(|&k| panel.event_date(panel.obs(k).unit) == EventDate::Finite(*e))
                .collect(),
        ),
        EstimandSpec::Difference { a, b } => {
            let wa = build_estimand(panel, a)?;
            let wb = build_estimand(panel, b)?;
            let mut w = wa.weights;
            for (k, v) in wb.weights {
                *w.entry(k).or_insert(0.0) -= v;
            }
            Ok(EstimandWeights::new(label, w))
        }
        EstimandSpec::PerDose { normalize } => {
            if treated.is_empty() {
                return Err(Error::EmptySupport(label));
            }
            let n1 = treated.len() as f64;
            let mut w = BTreeMap::new();
            for k in treated {
                let value = if *normalize {
                    let o = panel.obs(k);
                    match o.dose {
                        Some(d) if d != 0.0 && d.is_finite() => 1.0 / (n1 * d),
                        _ => {
                            return Err(Error::MissingDose {
                                unit: panel.unit_key(o.unit).to_string(),
                                time: o.time,
                            })
                        }
                    }
                } else {
                    1.0
                };
                w.insert(k, value);
            }
            Ok(EstimandWeights::new(label, w))
        }
        EstimandSpec::Custom { weights } => {
            let mut w = BTreeMap::new();
            for c in weights {
                let k = panel.locate(&c.unit, c.time)?;
                if !panel.is_treated(k) {
                    return Err(Error::WeightOutsideTreated {
                        unit: c.unit.clone(),
                        time: c.time,
                    });
                }
                *w.entry(k).or_insert(0.0) += c.value;
            }
            if w.is_empty() {
                return Err(Error::EmptySupport(label));
            }
            Ok(EstimandWeights::new(label, w))
        }
    }
}

/// The untreated-outcome design over all observations.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDesign {
    pub z: SparseDesign,
    /// Levels pinned to zero by the normalization.
    pub pinned: Vec<String>,
}

fn drop_level<T: Copy>(levels: &[T], norm: Normalization) -> Option<T> {
    match norm {
        Normalization::First => levels.first().copied(),
        Normalization::Last => levels.last().copied(),
    }
}

pub fn build_outcome_design(panel: &Panel, spec: &OutcomeModelSpec) -> Result<OutcomeDesign> {
    if spec.unit_blocks.is_empty() && spec.common_blocks.is_empty() {
        return Err(Error::InvalidOutcomeModel("no regressor blocks".into()));
    }
    let n = panel.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut names = Vec::new();
    let mut blocks = Vec::new();
    let mut pinned = Vec::new();
    let t0 = panel.periods().first().copied().unwrap_or(0);

    let mut has_intercept = false;
    if !spec.unit_blocks.is_empty() {
        let width = spec.unit_blocks.len();
        let cov_idx: Vec<Option<usize>> = spec
            .unit_blocks
            .iter()
            .map(|b| match b {
                UnitBlock::Covariate { name } => panel.covariate_index(name).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        for u in panel.units() {
            for b in &spec.unit_blocks {
                names.push(match b {
                    UnitBlock::Intercept => format!("alpha[{u}]"),
                    UnitBlock::Trend => format!("trend[{u}]"),
                    UnitBlock::Covariate { name } => format!("{name}[{u}]"),
                });
            }
        }
        for (k, o) in panel.observations().iter().enumerate() {
            for (r, b) in spec.unit_blocks.iter().enumerate() {
                let v = match b {
                    UnitBlock::Intercept => 1.0,
                    UnitBlock::Trend => (o.time - t0) as f64,
                    UnitBlock::Covariate { .. } => o.covariates[cov_idx[r].unwrap()],
                };
                rows[k].push((o.unit * width + r, v));
            }
        }
        blocks.push(Block {
            name: "unit".into(),
            start: 0,
            width,
            groups: panel.n_units(),
            absorbable: true,
        });
        has_intercept = spec.unit_blocks.contains(&UnitBlock::Intercept);
    }

    for cb in &spec.common_blocks {
        let start = names.len();
        match cb {
            CommonBlock::PeriodFe => {
                let drop = if has_intercept {
                    drop_level(panel.periods(), spec.normalization)
                } else {
                    None
                };
                let kept: Vec<i64> = panel
                    .periods()
                    .iter()
                    .copied()
                    .filter(|&t| Some(t) != drop)
                    .collect();
                if let Some(t) = drop {
                    pinned.push(format!("beta[{t}]"));
                }
                let pos: BTreeMap<i64, usize> = kept.iter().enumerate().map(|(i, &t)| (t, i)).collect();
                names.extend(kept.iter().map(|t| format!("beta[{t}]")));
                for (k, o) in panel.observations().iter().enumerate() {
                    if let Some(&p) = pos.get(&o.time) {
                        rows[k].push((start + p, 1.0));
                    }
                }
                blocks.push(Block {
                    name: "period".into(),
                    start,
                    width: 1,
                    groups: kept.len(),
                    absorbable: true,
                });
                has_intercept = true;
            }
            CommonBlock::GroupFe { column } => {
                let c = panel.covariate_index(column)?;
                let code = |x: f64| -> Result<i64> {
                    if x.fract() != 0.0 || !x.is_finite() {
                        return Err(Error::InvalidOutcomeModel(format!(
                            "group column `{column}` has non-integer value {x}"
                        )));
                    }
                    Ok(x as i64)
                };
                let mut levels = BTreeSet::new();
                for o in panel.observations() {
                    levels.insert(code(o.covariates[c])?);
                }
                let levels: Vec<i64> = levels.into_iter().collect();
                let drop = if has_intercept {
                    drop_level(&levels, spec.normalization)
                } else {
                    None
                };
                if let Some(g) = drop {
                    pinned.push(format!("{column}[{g}]"));
                }
                let kept: Vec<i64> = levels.into_iter().filter(|&g| Some(g) != drop).collect();
                let pos: BTreeMap<i64, usize> = kept.iter().enumerate().map(|(i, &g)| (g, i)).collect();
                names.extend(kept.iter().map(|g| format!("{column}[{g}]")));
                for (k, o) in panel.observations().iter().enumerate() {
                    if let Some(&p) = pos.get(&code(o.covariates[c])?) {
                        rows[k].push((start + p, 1.0));
                    }
                }
                blocks.push(Block {
                    name: format!("group:{column}"),
                    start,
                    width: 1,
                    groups: kept.len(),
                    absorbable: true,
                });
                has_intercept = true;
            }
            CommonBlock::Covariates { names: cov } => {
                if cov.is_empty() {
                    continue;
                }
                let idx = cov
                    .iter()
                    .map(|c| panel.covariate_index(c))
                    .collect::<Result<Vec<_>>>()?;
                names.extend(cov.iter().cloned());
                for (k, o) in panel.observations().iter().enumerate() {
                    for (j, &c) in idx.iter().enumerate() {
                        rows[k].push((start + j, o.covariates[c]));
                    }
                }
                blocks.push(Block {
                    name: "covariates".into(),
                    start,
                    width: cov.len(),
                    groups: 1,
                    absorbable: false,
                });
            }
            CommonBlock::Leads { exclude } => {
                let mut leads = BTreeSet::new();
                for k in 0..n {
                    if let Some(h) = panel.horizon_of(k) {
                        if h < 0 && !exclude.contains(&h) {
                            leads.insert(h);
                        }
                    }
                }
                let leads: Vec<i64> = leads.into_iter().collect();
                let pos: BTreeMap<i64, usize> = leads.iter().enumerate().map(|(i, &h)| (h, i)).collect();
                names.extend(leads.iter().map(|h| format!("lead[{h}]")));
                for (k, row) in rows.iter_mut().enumerate() {
                    if let Some(&p) = panel.horizon_of(k).and_then(|h| pos.get(&h)) {
                        row.push((start + p, 1.0));
                    }
                }
                blocks.push(Block {
                    name: "leads".into(),
                    start,
                    width: 1,
                    groups: leads.len(),
                    absorbable: true,
                });
            }
        }
    }
    if names.is_empty() {
        return Err(Error::InvalidOutcomeModel("design has no columns".into()));
    }
    Ok(OutcomeDesign {
        z: SparseDesign::from_rows(rows, names, blocks),
        pinned,
    })
}

/// Materialized Γ for the treated observations, in panel order.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentDesign {
    pub treated: Vec<usize>,
    /// N₁ × p.
    pub gamma: DMatrix<f64>,
    pub names: Vec<String>,
}

fn treated_position(panel: &Panel, treated: &[usize], cell: &CellValue) -> Result<usize> {
    let k = panel.locate(&cell.unit, cell.time)?;
    treated
        .binary_search(&k)
        .map_err(|_| Error::WeightOutsideTreated {
            unit: cell.unit.clone(),
            time: cell.time,
        })
}

pub fn build_treatment_design(panel: &Panel, tem: &TreatmentEffectModel) -> Result<TreatmentDesign> {
    let treated: Vec<usize> = (0..panel.len()).filter(|&k| panel.is_treated(k)).collect();
    let n1 = treated.len();
    let categorical = |key: &dyn Fn(usize) -> String| {
        let mut levels: Vec<String> = Vec::new();
        let mut index = Vec::with_capacity(n1);
        for &k in &treated {
            let l = key(k);
            let j = match levels.iter().position(|x| *x == l) {
                Some(j) => j,
                None => {
                    levels.push(l);
                    levels.len() - 1
                }
            };
            index.push(j);
        }
        (levels, index)
    };
    let (gamma, names) = match tem {
        TreatmentEffectModel::Unrestricted => (
            DMatrix::identity(n1, n1),
            treated
                .iter()
                .map(|&k| format!("tau[{}]", panel.label(k)))
                .collect(),
        ),
        TreatmentEffectModel::Constant => (DMatrix::from_element(n1, 1, 1.0), vec!["tau".to_string()]),
        TreatmentEffectModel::ByHorizon { cap } => {
            let mut hs: BTreeSet<i64> = BTreeSet::new();
            let bin = |h: i64| match cap {
                Some(c) if h >= *c => *c,
                _ => h,
            };
            for &k in &treated {
                hs.insert(bin(panel.horizon_of(k).unwrap()));
            }
            let hs: Vec<i64> = hs.into_iter().collect();
            let mut g = DMatrix::zeros(n1, hs.len());
            for (r, &k) in treated.iter().enumerate() {
                let j = hs.binary_search(&bin(panel.horizon_of(k).unwrap())).unwrap();
                g[(r, j)] = 1.0;
            }
            let names = hs
                .iter()
                .map(|&h| match cap {
                    Some(c) if h == *c => format!("tau[h{h}+]"),
                    _ => format!("tau[h{h}]"),
                })
                .collect();
            (g, names)
        }
        TreatmentEffectModel::ByCohort => {
            let (levels, index) = categorical(&|k| panel.event_date(panel.obs(k).unit).to_string());
            let mut g = DMatrix::zeros(n1, levels.len());
            for (r, &j) in index.iter().enumerate() {
                g[(r, j)] = 1.0;
            }
            let mut order: Vec<usize> = (0..levels.len()).collect();
            order.sort_by_key(|&j| levels[j].parse::<i64>().unwrap_or(i64::MAX));
            let g = DMatrix::from_fn(n1, levels.len(), |r, c| g[(r, order[c])]);
            (g, order.iter().map(|&j| format!("tau[e{}]", levels[j])).collect())
        }
        TreatmentEffectModel::Custom { columns } => {
            let mut g = DMatrix::zeros(n1, columns.len());
            for (j, col) in columns.iter().enumerate() {
                for c in &col.cells {
                    g[(treated_position(panel, &treated, c)?, j)] += c.value;
                }
            }
            let f = GramFactor::new(&(g.transpose() * &g));
            if !f.is_full_rank() {
                return Err(Error::InvalidTreatmentModel(format!(
                    "custom Γ has rank {} with {} columns",
                    f.rank(),
                    columns.len()
                )));
            }
            (g, columns.iter().map(|c| c.name.clone()).collect())
        }
        TreatmentEffectModel::Restriction { rows } => {
            let mut b = DMatrix::zeros(rows.len(), n1);
            for (i, row) in rows.iter().enumerate() {
                for c in row {
                    b[(i, treated_position(panel, &treated, c)?)] += c.value;
                }
            }
            let g = gamma_from_restrictions(&b);
            if g.ncols() == 0 {
                return Err(Error::InvalidTreatmentModel(
                    "restrictions leave no free effects".into(),
                ));
            }
            let names = (0..g.ncols()).map(|j| format!("theta[{j}]")).collect();
            (g, names)
        }
    };
    Ok(TreatmentDesign {
        treated,
        gamma,
        names,
    })
}

/// Orthonormal basis of the null space of `m` (columns), from the eigenvectors of m′m.
pub fn null_space_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let eig = SymmetricEigen::new(m.transpose() * m);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let cols: Vec<usize> = (0..n)
        .filter(|&j| eig.eigenvalues[j] <= DEFAULT_RANK_TOL * top.max(f64::MIN_POSITIVE))
        .collect();
    DMatrix::from_fn(n, cols.len(), |i, c| eig.eigenvectors[(i, cols[c])])
}

/// Γ whose columns span {τ : Bτ = 0}.
pub fn gamma_from_restrictions(b: &DMatrix<f64>) -> DMatrix<f64> {
    null_space_basis(b)
}

/// A restriction matrix B (rows) with BΓ = 0 and rank N₁ − rank Γ.
pub fn restrictions_from_gamma(gamma: &DMatrix<f64>) -> DMatrix<f64> {
    null_space_basis(&gamma.transpose()).transpose()
}

/// Full design for the joint regression of Y on [Z, DΓ].
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub z: SparseDesign,
    pub pinned: Vec<String>,
    pub untreated: Vec<usize>,
    pub treated: Vec<usize>,
    pub gamma: DMatrix<f64>,
    pub theta_names: Vec<String>,
    /// Rank of Z restricted to untreated observations.
    pub untreated_rank: RankReport,
}

impl DesignMatrices {
    pub fn z0(&self) -> SparseDesign {
        self.z.select_rows(&self.untreated)
    }

    pub fn z1(&self) -> SparseDesign {
        self.z.select_rows(&self.treated)
    }

    /// N × p matrix DΓ with zero rows for untreated observations.
    pub fn d_gamma(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.z.nrows(), self.gamma.ncols());
        for (r, &k) in self.treated.iter().enumerate() {
            g.row_mut(k).copy_from(&self.gamma.row(r));
        }
        g
    }

    /// Sparse [Z, DΓ] with a trailing dense block for θ.
    pub fn joint(&self) -> SparseDesign {
        let p = self.gamma.ncols();
        let mut rows = vec![Vec::new(); self.z.nrows()];
        for (r, &k) in self.treated.iter().enumerate() {
            rows[k] = (0..p).map(|j| (j, self.gamma[(r, j)])).collect();
        }
        let theta = SparseDesign::from_rows(
            rows,
            self.theta_names.clone(),
            vec![Block {
                name: "theta".into(),
                start: 0,
                width: p,
                groups: 1,
                absorbable: false,
            }],
        );
        self.z.hstack(&theta)
    }
}

pub(crate) fn assemble(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    tem: &TreatmentEffectModel,
) -> Result<DesignMatrices> {
    let od = build_outcome_design(panel, spec)?;
    let td = build_treatment_design(panel, tem)?;
    let part = panel.partition();
    let f0 = GramFactor::new(&od.z.select_rows(&part.untreated).gram(None));
    let untreated_rank = RankReport {
        columns: f0.dim(),
        rank: f0.rank(),
        dropped: f0
            .dropped()
            .into_iter()
            .map(|j| od.z.col_names()[j].clone())
            .collect(),
    };
    Ok(DesignMatrices {
        z: od.z,
        pinned: od.pinned,
        untreated: part.untreated,
        treated: td.treated,
        gamma: td.gamma,
        theta_names: td.names,
        untreated_rank,
    })
}

/// Builds Z and DΓ. For a restricted effect model the joint design must
/// identify θ; deficiencies of Z alone are only reported in `untreated_rank`.
pub fn materialize_design(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    tem: &TreatmentEffectModel,
) -> Result<DesignMatrices> {
    let dm = assemble(panel, spec, tem)?;
    if !tem.is_unrestricted() {
        let joint = dm.joint();
        let fj = GramFactor::new(&joint.gram(None));
        let fz = GramFactor::new(&dm.z.gram(None));
        let deficiency = (fz.rank() + dm.gamma.ncols()).saturating_sub(fj.rank());
        if deficiency > 0 {
            let mut groups: Vec<String> = Vec::new();
            for v in fj.null_space() {
                let top = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                for (j, x) in v.iter().enumerate() {
                    let g = joint.group_of(j).to_string();
                    if x.abs() > 1e-8 * top && !groups.contains(&g) {
                        groups.push(g);
                    }
                }
            }
            return Err(Error::RankDeficientAfterNormalization { deficiency, groups });
        }
    }
    Ok(dm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Estimability {
    Identified,
    /// Design columns along which the estimand cannot be matched by untreated data.
    NotIdentified {
        certificate: Vec<String>,
    },
}

impl Estimability {
    pub fn is_identified(&self) -> bool {
        matches!(self, Estimability::Identified)
    }
}

/// Relative residual tolerance for the estimability test.
pub const ESTIMABILITY_TOL: f64 = 1e-8;

/// Decides whether Z₁′w₁ lies in the row space of Z₀, i.e. whether some
/// weights on untreated observations cancel every model column.
pub fn check_estimability(
    panel: &Panel,
    spec: &OutcomeModelSpec,
    w: &EstimandWeights,
) -> Result<Estimability> {
    let model = crate::estimator::ImputationModel::new(panel, spec)?;
    model.estimability(w)
}
