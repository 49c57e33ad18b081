//! Weighted linear least squares over sparse block designs.
//!
//! Two solvers share one interface: a dense path that factors the Gram
//! matrix with a rank-revealing pivoted Cholesky, and an alternating path
//! that absorbs grouped fixed-effect blocks by iterated projections and
//! solves only the remaining columns densely.

pub(crate) mod alternating;
mod factor;
mod sparse;

pub use alternating::SweepReport;
pub use factor::{GramFactor, DEFAULT_RANK_TOL};
pub use sparse::{Block, SparseDesign};

use crate::error::{Error, Result};
use alternating::{absorb, BlockIndex};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Dense,
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsqOptions {
    pub method: Method,
    /// Pivot threshold for the dense factorization.
    pub rank_tol: f64,
    /// Sweeps stop once the largest change in the iterate falls below `tol` times its scale.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LsqOptions {
    fn default() -> Self {
        LsqOptions {
            method: Method::Dense,
            rank_tol: DEFAULT_RANK_TOL,
            tol: 1e-13,
            max_sweeps: 10_000,
        }
    }
}

impl LsqOptions {
    pub fn alternating() -> Self {
        LsqOptions {
            method: Method::Alternating,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LsqProblem<'a> {
    pub design: &'a SparseDesign,
    pub response: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

impl<'a> LsqProblem<'a> {
    pub fn new(design: &'a SparseDesign, response: &'a [f64]) -> Self {
        LsqProblem {
            design,
            response,
            weights: None,
        }
    }

    pub fn weighted(mut self, weights: &'a [f64]) -> Self {
        self.weights = Some(weights);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.design.nrows() == 0 || self.design.ncols() == 0 {
            return Err(Error::EmptyDesign);
        }
        if self.response.len() != self.design.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.design.nrows(),
                got: self.response.len(),
            });
        }
        if let Some(w) = self.weights {
            if w.len() != self.design.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: self.design.nrows(),
                    got: w.len(),
                });
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::SolverFailure(
                    "observation weights must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Columns pinned to zero by the rank-revealing factorization.
///
/// On the alternating path only the densely solved columns are checked;
/// redundancy among absorbed fixed effects does not affect fitted values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub columns: usize,
    pub rank: usize,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    /// One coefficient per design column; dropped columns are zero.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rank: RankReport,
    pub convergence: SweepReport,
}

impl LsqSolution {
    pub fn ssr(&self, weights: Option<&[f64]>) -> f64 {
        self.residuals
            .iter()
            .enumerate()
            .map(|(i, r)| weights.map_or(1.0, |w| w[i]) * r * r)
            .sum()
    }
}

fn rank_report(design: &SparseDesign, factor: &GramFactor, cols: &[usize]) -> RankReport {
    RankReport {
        columns: factor.dim(),
        rank: factor.rank(),
        dropped: factor
            .dropped()
            .into_iter()
            .map(|j| design.col_names()[cols[j]].clone())
            .collect(),
    }
}

fn no_sweeps() -> SweepReport {
    SweepReport {
        sweeps: 0,
        last_change: 0.0,
        converged: true,
        ssr_history: Vec::new(),
    }
}

pub fn solve(problem: &LsqProblem<'_>, opts: &LsqOptions) -> Result<LsqSolution> {
    problem.validate()?;
    match opts.method {
        Method::Dense => solve_dense(problem, opts),
        Method::Alternating => solve_alternating(problem, opts),
    }
}

fn solve_dense(problem: &LsqProblem<'_>, opts: &LsqOptions) -> Result<LsqSolution> {
    let z = problem.design;
    let factor = GramFactor::with_tol(&z.gram(problem.weights), opts.rank_tol);
    let coefficients = factor.solve(&z.t_mul(problem.response, problem.weights));
    let fitted = z.mul(&coefficients);
    let residuals = problem.response.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let all: Vec<usize> = (0..z.ncols()).collect();
    Ok(LsqSolution {
        coefficients,
        fitted,
        residuals,
        rank: rank_report(z, &factor, &all),
        convergence: no_sweeps(),
    })
}

fn check_converged(r: &SweepReport) -> Result<()> {
    if r.converged {
        Ok(())
    } else {
        Err(Error::NoConvergence {
            iterations: r.sweeps,
            last_change: r.last_change,
        })
    }
}

fn absorbable_indices(problem: &LsqProblem<'_>, which: impl Fn(&Block) -> bool) -> Vec<BlockIndex> {
    problem
        .design
        .blocks()
        .iter()
        .filter(|b| which(b))
        .map(|b| BlockIndex::new(problem.design, b, problem.weights))
        .collect()
}

fn solve_alternating(problem: &LsqProblem<'_>, opts: &LsqOptions) -> Result<LsqSolution> {
    let z = problem.design;
    let fe = absorbable_indices(problem, |b| b.absorbable);
    let in_fe = |j: usize| z.blocks().iter().any(|b| b.absorbable && b.contains(j));
    let dense_cols: Vec<usize> = (0..z.ncols()).filter(|&j| !in_fe(j)).collect();

    let mut coefficients = vec![0.0; z.ncols()];
    let mut rank = RankReport {
        columns: dense_cols.len(),
        rank: 0,
        dropped: Vec::new(),
    };
    let mut partial = problem.response.to_vec();
    if !dense_cols.is_empty() {
        let mut ytil = problem.response.to_vec();
        check_converged(&absorb(
            &fe,
            &mut ytil,
            problem.weights,
            opts.tol,
            opts.max_sweeps,
            None,
        ))?;
        let mut xtil = DMatrix::zeros(z.nrows(), dense_cols.len());
        for (c, &j) in dense_cols.iter().enumerate() {
            let mut col = z.column(j);
            check_converged(&absorb(
                &fe,
                &mut col,
                problem.weights,
                opts.tol,
                opts.max_sweeps,
                None,
            ))?;
            xtil.set_column(c, &nalgebra::DVector::from_vec(col));
        }
        let wx = match problem.weights {
            Some(w) => DMatrix::from_fn(xtil.nrows(), xtil.ncols(), |i, j| w[i] * xtil[(i, j)]),
            None => xtil.clone(),
        };
        let gram = xtil.transpose() * &wx;
        let rhs = wx.transpose() * nalgebra::DVector::from_vec(ytil);
        let factor = GramFactor::with_tol(&gram, opts.rank_tol);
        let delta = factor.solve(rhs.as_slice());
        rank = rank_report(z, &factor, &dense_cols);
        for (c, &j) in dense_cols.iter().enumerate() {
            coefficients[j] = delta[c];
        }
        let xd = z.mul(&coefficients);
        for (p, x) in partial.iter_mut().zip(xd) {
            *p -= x;
        }
    }
    let convergence = absorb(
        &fe,
        &mut partial,
        problem.weights,
        opts.tol,
        opts.max_sweeps,
        Some(&mut coefficients),
    );
    check_converged(&convergence)?;
    let residuals = partial;
    let fitted = problem
        .response
        .iter()
        .zip(&residuals)
        .map(|(y, r)| y - r)
        .collect();
    rank.rank += fe.iter().map(|b| b.width * b.groups).sum::<usize>();
    rank.columns = z.ncols();
    Ok(LsqSolution {
        coefficients,
        fitted,
        residuals,
        rank,
        convergence,
    })
}

/// Data left after partialling out some blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Residualized {
    pub response: Vec<f64>,
    /// Remaining design columns, residualized, one vector per column.
    pub columns: Vec<Vec<f64>>,
    pub col_names: Vec<String>,
    pub convergence: SweepReport,
}

/// Residualizes the response and every column outside `blocks` (indices into
/// the design's block list) against the columns of those blocks.
pub fn project_out(problem: &LsqProblem<'_>, blocks: &[usize], opts: &LsqOptions) -> Result<Residualized> {
    problem.validate()?;
    let z = problem.design;
    let chosen: Vec<&Block> = blocks.iter().map(|&b| &z.blocks()[b]).collect();
    let idx: Vec<BlockIndex> = chosen
        .iter()
        .map(|b| BlockIndex::new(z, b, problem.weights))
        .collect();
    let mut response = problem.response.to_vec();
    let mut convergence = absorb(
        &idx,
        &mut response,
        problem.weights,
        opts.tol,
        opts.max_sweeps,
        None,
    );
    check_converged(&convergence)?;
    let mut columns = Vec::new();
    let mut col_names = Vec::new();
    for j in 0..z.ncols() {
        if chosen.iter().any(|b| b.contains(j)) {
            continue;
        }
        let mut col = z.column(j);
        let r = absorb(&idx, &mut col, problem.weights, opts.tol, opts.max_sweeps, None);
        check_converged(&r)?;
        convergence.sweeps = convergence.sweeps.max(r.sweeps);
        columns.push(col);
        col_names.push(z.col_names()[j].clone());
    }
    Ok(Residualized {
        response,
        columns,
        col_names,
        convergence,
    })
}
