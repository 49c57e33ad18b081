use nalgebra::DMatrix;

/// Relative pivot threshold on the unit-diagonal Gram matrix.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Rank-revealing Cholesky factorization of a symmetric PSD Gram matrix.
///
/// The matrix is first equilibrated to unit diagonal, then factored with
/// diagonal pivoting; pivoting stops once the largest remaining Schur
/// complement diagonal falls below the threshold. Columns that were never
/// pivoted in are reported as dropped and receive zero in [`GramFactor::solve`].
#[derive(Debug, Clone)]
pub struct GramFactor {
    n: usize,
    scale: Vec<f64>,
    /// perm[k] = original column at pivot position k
    perm: Vec<usize>,
    rank: usize,
    /// n × rank lower-trapezoidal factor in pivoted order
    l: DMatrix<f64>,
}

impl GramFactor {
    pub fn new(gram: &DMatrix<f64>) -> GramFactor {
        Self::with_tol(gram, DEFAULT_RANK_TOL)
    }

    pub fn with_tol(gram: &DMatrix<f64>, tol: f64) -> GramFactor {
        let n = gram.nrows();
        let scale: Vec<f64> = (0..n)
            .map(|j| {
                let d = gram[(j, j)];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut a = DMatrix::from_fn(n, n, |i, j| gram[(i, j)] * scale[i] * scale[j]);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rank = 0;
        for k in 0..n {
            let (mut best, mut best_val) = (k, a[(k, k)]);
            for j in k + 1..n {
                if a[(j, j)] > best_val {
                    best = j;
                    best_val = a[(j, j)];
                }
            }
            if !(best_val > tol) {
                break;
            }
            if best != k {
                a.swap_rows(k, best);
                a.swap_columns(k, best);
                perm.swap(k, best);
            }
            let pivot = a[(k, k)].sqrt();
            a[(k, k)] = pivot;
            for i in k + 1..n {
                a[(i, k)] /= pivot;
            }
            for j in k + 1..n {
                let ljk = a[(j, k)];
                if ljk == 0.0 {
                    continue;
                }
                for i in j..n {
                    let v = a[(i, k)] * ljk;
                    a[(i, j)] -= v;
                }
            }
            // keep the trailing block symmetric for the pivot search and swaps
            for j in k + 1..n {
                for i in j + 1..n {
                    a[(j, i)] = a[(i, j)];
                }
            }
            rank += 1;
        }
        let l = DMatrix::from_fn(n, rank, |i, j| if i >= j { a[(i, j)] } else { 0.0 });
        GramFactor {
            n,
            scale,
            perm,
            rank,
            l,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.n
    }

    /// Original indices of columns left out of the pivoted basis.
    pub fn dropped(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.perm[self.rank..].to_vec();
        d.sort_unstable();
        d
    }

    /// Basic solution of G x = b: exact when b lies in the range of G.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let r = self.rank;
        let mut y: Vec<f64> = (0..r)
            .map(|k| b[self.perm[k]] * self.scale[self.perm[k]])
            .collect();
        // forward: L11 y = c
        for i in 0..r {
            let mut s = y[i];
            for j in 0..i {
                s -= self.l[(i, j)] * y[j];
            }
            y[i] = s / self.l[(i, i)];
        }
        // backward: L11' z = y
        for i in (0..r).rev() {
            let mut s = y[i];
            for j in i + 1..r {
                s -= self.l[(j, i)] * y[j];
            }
            y[i] = s / self.l[(i, i)];
        }
        let mut x = vec![0.0; self.n];
        for k in 0..r {
            let j = self.perm[k];
            x[j] = y[k] * self.scale[j];
        }
        x
    }

    /// Solves for several right-hand sides given as columns.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col: Vec<f64> = b.column(j).iter().copied().collect();
            let x = self.solve(&col);
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Basis of the null space of G, one vector per dropped column, in original coordinates.
    pub fn null_space(&self) -> Vec<Vec<f64>> {
        let r = self.rank;
        let mut basis = Vec::new();
        for d in r..self.n {
            // A = S G S; for the dropped pivot d solve L11' z = -L21[d,:]'
            let mut z: Vec<f64> = (0..r).map(|j| -self.l[(d, j)]).collect();
            for i in (0..r).rev() {
                let mut s = z[i];
                for j in i + 1..r {
                    s -= self.l[(j, i)] * z[j];
                }
                z[i] = s / self.l[(i, i)];
            }
            let mut x = vec![0.0; self.n];
            for k in 0..r {
                let j = self.perm[k];
                x[j] = z[k] * self.scale[j];
            }
            let j = self.perm[d];
            x[j] = if self.scale[j] > 0.0 { self.scale[j] } else { 1.0 };
            basis.push(x);
        }
        basis
    }
}
