use nalgebra::DMatrix;

/// A contiguous run of design columns.
///
/// Grouped blocks hold `groups` groups of `width` columns each; a row has
/// non-zeros in at most one group. Fixed effects are grouped blocks with
/// width 1, unit-specific trends have width 2, and a dense covariate block is
/// a single group.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub width: usize,
    pub groups: usize,
    /// Whether the block can be absorbed by alternating projections.
    pub absorbable: bool,
}

impl Block {
    pub fn end(&self) -> usize {
        self.start + self.width * self.groups
    }

    pub fn ncols(&self) -> usize {
        self.width * self.groups
    }

    pub fn contains(&self, col: usize) -> bool {
        col >= self.start && col < self.end()
    }
}

/// Row-compressed sparse design matrix with named columns and block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDesign {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    col_names: Vec<String>,
    blocks: Vec<Block>,
}

impl SparseDesign {
    /// Builds a design from per-row `(column, value)` entries. Zero entries are dropped.
    pub fn from_rows(
        rows: Vec<Vec<(usize, f64)>>,
        col_names: Vec<String>,
        blocks: Vec<Block>,
    ) -> SparseDesign {
        let ncols = col_names.len();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            for (c, v) in r {
                debug_assert!(c < ncols);
                if v != 0.0 {
                    cols.push(c as u32);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        SparseDesign {
            ncols,
            row_ptr,
            cols,
            vals,
            col_names,
            blocks,
        }
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn col_names(&self) -> &[String] {
        &self.col_names
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// Name of the block containing `col`, or the column name if it is unblocked.
    pub fn group_of(&self, col: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| b.contains(col))
            .map(|b| b.name.as_str())
            .unwrap_or(&self.col_names[col])
    }

    pub fn select_rows(&self, rows: &[usize]) -> SparseDesign {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for &i in rows {
            let (c, v) = self.row(i);
            cols.extend_from_slice(c);
            vals.extend_from_slice(v);
            row_ptr.push(cols.len());
        }
        SparseDesign {
            ncols: self.ncols,
            row_ptr,
            cols,
            vals,
            col_names: self.col_names.clone(),
            blocks: self.blocks.clone(),
        }
    }

    /// Appends the columns of `other` (same row count) to the right.
    pub fn hstack(&self, other: &SparseDesign) -> SparseDesign {
        assert_eq!(self.nrows(), other.nrows(), "row count mismatch");
        let off = self.ncols;
        let rows = (0..self.nrows())
            .map(|i| {
                let (c1, v1) = self.row(i);
                let (c2, v2) = other.row(i);
                c1.iter()
                    .zip(v1)
                    .map(|(&c, &v)| (c as usize, v))
                    .chain(c2.iter().zip(v2).map(|(&c, &v)| (c as usize + off, v)))
                    .collect()
            })
            .collect();
        let mut names = self.col_names.clone();
        names.extend(other.col_names.iter().cloned());
        let mut blocks = self.blocks.clone();
        blocks.extend(other.blocks.iter().map(|b| Block {
            start: b.start + off,
            ..b.clone()
        }));
        SparseDesign::from_rows(rows, names, blocks)
    }

    /// Z'WZ.
    pub fn gram(&self, weights: Option<&[f64]>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows() {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let (c, v) = self.row(i);
            for a in 0..c.len() {
                let wa = w * v[a];
                for b in 0..c.len() {
                    g[(c[a] as usize, c[b] as usize)] += wa * v[b];
                }
            }
        }
        g
    }

    /// Z'Wy.
    pub fn t_mul(&self, y: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for i in 0..self.nrows() {
            let wy = weights.map_or(1.0, |w| w[i]) * y[i];
            if wy == 0.0 {
                continue;
            }
            let (c, v) = self.row(i);
            for (&cc, &vv) in c.iter().zip(v) {
                out[cc as usize] += vv * wy;
            }
        }
        out
    }

    /// Zx.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row_dot(i, x)).collect()
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(&cc, &vv)| vv * x[cc as usize]).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (&cc, &vv) in c.iter().zip(v) {
                m[(i, cc as usize)] = vv;
            }
        }
        m
    }

    /// Dense copy of column `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().position(|&cc| cc as usize == j).map_or(0.0, |p| v[p])
            })
            .collect()
    }
}
