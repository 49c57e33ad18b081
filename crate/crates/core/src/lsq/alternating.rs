//! Alternating projections over grouped blocks.
//!
//! Each absorbable block is a partition of rows into groups with a small
//! per-group regressor set (a single 1 for fixed effects). Projecting a
//! vector on one block is a per-group weighted least-squares fit, so a sweep
//! over all blocks costs O(nnz). Sweeps are sequential; accumulation order is
//! fixed by row order, so results are deterministic.

use super::factor::GramFactor;
use super::sparse::{Block, SparseDesign};
use nalgebra::DMatrix;

/// Per-block row layout used by the projection sweeps.
#[derive(Debug, Clone)]
pub(crate) struct BlockIndex {
    pub start: usize,
    pub width: usize,
    pub groups: usize,
    /// group of each row, or u32::MAX when the row has no entry in the block
    row_group: Vec<u32>,
    /// row values within the group, `width` per row
    row_vals: Vec<f64>,
    /// per-group inverse of the (weighted) Gram, or a factor for width > 1
    solvers: Vec<GroupSolver>,
}

#[derive(Debug, Clone)]
enum GroupSolver {
    Empty,
    Scalar(f64),
    Small(GramFactor),
}

const NO_GROUP: u32 = u32::MAX;

impl BlockIndex {
    pub fn new(design: &SparseDesign, block: &Block, weights: Option<&[f64]>) -> BlockIndex {
        let n = design.nrows();
        let w = block.width;
        let mut row_group = vec![NO_GROUP; n];
        let mut row_vals = vec![0.0; n * w];
        let mut grams = vec![vec![0.0; w * w]; block.groups];
        for i in 0..n {
            let (c, v) = design.row(i);
            for (&cc, &vv) in c.iter().zip(v) {
                let col = cc as usize;
                if !block.contains(col) {
                    continue;
                }
                let off = col - block.start;
                let g = (off / w) as u32;
                debug_assert!(row_group[i] == NO_GROUP || row_group[i] == g);
                row_group[i] = g;
                row_vals[i * w + off % w] = vv;
            }
            if row_group[i] != NO_GROUP {
                let wi = weights.map_or(1.0, |ws| ws[i]);
                let g = row_group[i] as usize;
                let a = &row_vals[i * w..(i + 1) * w];
                for p in 0..w {
                    for q in 0..w {
                        grams[g][p * w + q] += wi * a[p] * a[q];
                    }
                }
            }
        }
        let solvers = grams
            .into_iter()
            .map(|g| {
                if w == 1 {
                    if g[0] > 0.0 {
                        GroupSolver::Scalar(1.0 / g[0])
                    } else {
                        GroupSolver::Empty
                    }
                } else if g.iter().all(|&x| x == 0.0) {
                    GroupSolver::Empty
                } else {
                    GroupSolver::Small(GramFactor::new(&DMatrix::from_row_slice(w, w, &g)))
                }
            })
            .collect();
        BlockIndex {
            start: block.start,
            width: w,
            groups: block.groups,
            row_group,
            row_vals,
            solvers,
        }
    }

    /// Projects `x` on the block; subtracts the fit in place and returns the
    /// per-group coefficients (flattened, `width` per group).
    pub fn sweep(&self, x: &mut [f64], weights: Option<&[f64]>) -> Vec<f64> {
        self.sweep_with_offset(x, weights, None)
    }

    /// Like [`BlockIndex::sweep`], with `offset` added to the per-group
    /// right-hand side before solving.
    pub fn sweep_with_offset(
        &self,
        x: &mut [f64],
        weights: Option<&[f64]>,
        offset: Option<&[f64]>,
    ) -> Vec<f64> {
        let w = self.width;
        let mut rhs = match offset {
            Some(o) => o.to_vec(),
            None => vec![0.0; self.groups * w],
        };
        for (i, &g) in self.row_group.iter().enumerate() {
            if g == NO_GROUP {
                continue;
            }
            let wx = weights.map_or(1.0, |ws| ws[i]) * x[i];
            let a = &self.row_vals[i * w..(i + 1) * w];
            let base = g as usize * w;
            for p in 0..w {
                rhs[base + p] += a[p] * wx;
            }
        }
        let mut coef = vec![0.0; self.groups * w];
        for (g, s) in self.solvers.iter().enumerate() {
            match s {
                GroupSolver::Empty => {}
                GroupSolver::Scalar(inv) => coef[g] = rhs[g] * inv,
                GroupSolver::Small(f) => {
                    let c = f.solve(&rhs[g * w..(g + 1) * w]);
                    coef[g * w..(g + 1) * w].copy_from_slice(&c);
                }
            }
        }
        for (i, &g) in self.row_group.iter().enumerate() {
            if g == NO_GROUP {
                continue;
            }
            let a = &self.row_vals[i * w..(i + 1) * w];
            let c = &coef[g as usize * w..(g as usize + 1) * w];
            let fit: f64 = a.iter().zip(c).map(|(p, q)| p * q).sum();
            x[i] -= fit;
        }
        coef
    }
}

/// Outcome of a sequence of sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub sweeps: usize,
    pub last_change: f64,
    pub converged: bool,
    /// Weighted SSR after each sweep.
    pub ssr_history: Vec<f64>,
}

/// Residualizes `x` against all `blocks` by cycling projections until the
/// largest per-sweep change is below `tol · scale`. When `coefs` is given,
/// the absorbed coefficients are accumulated into it (indexed by design column).
pub(crate) fn absorb(
    blocks: &[BlockIndex],
    x: &mut [f64],
    weights: Option<&[f64]>,
    tol: f64,
    max_sweeps: usize,
    mut coefs: Option<&mut [f64]>,
) -> SweepReport {
    let scale = match x.iter().fold(0.0f64, |m, v| m.max(v.abs())) {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let mut prev = x.to_vec();
    let mut report = SweepReport {
        sweeps: 0,
        last_change: 0.0,
        converged: false,
        ssr_history: Vec::new(),
    };
    if blocks.is_empty() {
        report.converged = true;
        return report;
    }
    while report.sweeps < max_sweeps {
        for b in blocks {
            let c = b.sweep(x, weights);
            if let Some(acc) = coefs.as_deref_mut() {
                for (k, v) in c.into_iter().enumerate() {
                    acc[b.start + k] += v;
                }
            }
        }
        report.sweeps += 1;
        let change = x.iter().zip(&prev).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        report.last_change = change / scale;
        report.ssr_history.push(
            x.iter()
                .enumerate()
                .map(|(i, v)| weights.map_or(1.0, |w| w[i]) * v * v)
                .sum(),
        );
        if change <= tol * scale || blocks.len() == 1 {
            report.converged = true;
            break;
        }
        prev.copy_from_slice(x);
    }
    report
}
