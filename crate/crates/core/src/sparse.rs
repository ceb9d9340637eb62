//! Coordinate-list sparse matrices used for every adjacency in the crate.

use ndarray::Array2;

/// A square or rectangular sparse matrix in coordinate form.
///
/// `weight_index` optionally ties each stored entry to a slot in an external
/// per-edge weight vector. Bipartite adjacencies store every undirected edge
/// twice (user row and item row) and both entries point at the same slot,
/// which is how an edge mask is applied symmetrically.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub weight_index: Vec<usize>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
            weight_index: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64, slot: usize) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
        self.weight_index.push(slot);
    }

    pub fn identity(n: usize) -> Self {
        let mut m = SparseMatrix::new(n, n);
        for i in 0..n {
            m.push(i, i, 1.0, i);
        }
        m
    }

    pub fn from_dense(dense: &Array2<f64>) -> Self {
        let (r, c) = dense.dim();
        let mut m = SparseMatrix::new(r, c);
        for ((i, j), &v) in dense.indexed_iter() {
            if v != 0.0 {
                let slot = m.nnz();
                m.push(i, j, v, slot);
            }
        }
        m
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.nrows, self.ncols));
        for k in 0..self.nnz() {
            d[[self.rows[k], self.cols[k]]] += self.vals[k];
        }
        d
    }

    /// Number of distinct weight slots referenced.
    pub fn num_slots(&self) -> usize {
        self.weight_index.iter().map(|&s| s + 1).max().unwrap_or(0)
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        self.matmul_weighted(x, None)
    }

    /// `(self ⊙ w) · x` where `w` is gathered through `weight_index`.
    pub fn matmul_weighted(&self, x: &Array2<f64>, weights: Option<&[f64]>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.ncols, "sparse matmul inner dimension");
        let d = x.ncols();
        let mut out = Array2::zeros((self.nrows, d));
        for k in 0..self.nnz() {
            let mut a = self.vals[k];
            if let Some(w) = weights {
                a *= w[self.weight_index[k]];
            }
            if a == 0.0 {
                continue;
            }
            let src = x.row(self.cols[k]);
            let mut dst = out.row_mut(self.rows[k]);
            dst.scaled_add(a, &src);
        }
        out
    }

    /// Entry values after multiplying each by its slot weight.
    pub fn reweighted(&self, weights: &[f64]) -> SparseMatrix {
        let mut m = self.clone();
        for (v, &s) in m.vals.iter_mut().zip(&self.weight_index) {
            *v *= weights[s];
        }
        m
    }

    /// `D^{-1/2} A D^{-1/2}` using row sums as degrees. Zero-degree rows
    /// stay zero.
    pub fn sym_normalized(&self) -> SparseMatrix {
        assert_eq!(self.nrows, self.ncols);
        let mut deg = vec![0.0; self.nrows];
        for k in 0..self.nnz() {
            deg[self.rows[k]] += self.vals[k];
        }
        let inv: Vec<f64> = deg
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let mut m = self.clone();
        for k in 0..m.nnz() {
            m.vals[k] *= inv[m.rows[k]] * inv[m.cols[k]];
        }
        m
    }

    /// Merges duplicate coordinates by summing, sorted row-major.
    pub fn coalesced(&self) -> SparseMatrix {
        let mut idx: Vec<usize> = (0..self.nnz()).collect();
        idx.sort_by_key(|&k| (self.rows[k], self.cols[k]));
        let mut m = SparseMatrix::new(self.nrows, self.ncols);
        for k in idx {
            let (r, c) = (self.rows[k], self.cols[k]);
            if m.nnz() > 0 && m.rows[m.nnz() - 1] == r && m.cols[m.nnz() - 1] == c {
                let last = m.nnz() - 1;
                m.vals[last] += self.vals[k];
            } else {
                let slot = m.nnz();
                m.push(r, c, self.vals[k], slot);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_dense() {
        let a = array![[0.0, 2.0, 0.0], [1.0, 0.0, 3.0]];
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let s = SparseMatrix::from_dense(&a);
        assert_eq!(s.matmul(&x), a.dot(&x));
        assert_eq!(s.to_dense(), a);
    }

    #[test]
    fn normalization_of_path_graph() {
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let n = SparseMatrix::from_dense(&a).sym_normalized().to_dense();
        let expect = 1.0 / 2f64.sqrt();
        assert!((n[[0, 1]] - expect).abs() < 1e-15);
        assert!((n[[1, 2]] - expect).abs() < 1e-15);
    }

    #[test]
    fn coalesce_sums_duplicates() {
        let mut s = SparseMatrix::new(2, 2);
        s.push(1, 0, 1.0, 0);
        s.push(0, 1, 2.0, 1);
        s.push(1, 0, 0.5, 2);
        let c = s.coalesced();
        assert_eq!(c.nnz(), 2);
        assert_eq!(c.to_dense(), array![[0.0, 2.0], [1.5, 0.0]]);
    }
}
