//! Compressed sparse row matrix with exact transpose multiply.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sparse matrix in CSR form. Rows are measurement entries, columns pixels.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assemble from per-row `(column, value)` lists.
    pub fn from_rows(ncols: usize, rows: &[Vec<(u32, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let nnz = rows.iter().map(|r| r.len()).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        indptr.push(0usize);
        for row in rows {
            for &(c, v) in row {
                debug_assert!((c as usize) < ncols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows: rows.len(),
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_raw(
        nrows: usize,
        ncols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != nrows + 1 || indices.len() != values.len() {
            return Err(Error::Corrupt("csr index arrays inconsistent".into()));
        }
        if *indptr.last().unwrap_or(&0) != indices.len() {
            return Err(Error::Corrupt("csr indptr does not cover nnz".into()));
        }
        if indices.iter().any(|&c| c as usize >= ncols) {
            return Err(Error::Corrupt("csr column index out of range".into()));
        }
        Ok(CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        self.indices[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `out = M x`
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        for i in 0..self.nrows {
            let lo = self.indptr[i];
            let hi = self.indptr[i + 1];
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.values[k] * x[self.indices[k] as usize];
            }
            out[i] = acc;
        }
    }

    /// `out = M^T y`, the exact transpose multiply.
    pub fn rmatvec(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.nrows);
        assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for i in 0..self.nrows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            let lo = self.indptr[i];
            let hi = self.indptr[i + 1];
            for k in lo..hi {
                out[self.indices[k] as usize] += self.values[k] * yi;
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.nrows, self.ncols));
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                dense[[i, j]] += v;
            }
        }
        dense
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_dense() {
        let rows = vec![
            vec![(0u32, 1.0), (2, 2.0)],
            vec![(1u32, -1.0)],
            vec![],
            vec![(0u32, 0.5), (1, 0.5), (2, 0.5)],
        ];
        let m = CsrMatrix::from_rows(3, &rows);
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 4];
        m.matvec(&x, &mut y);
        assert_eq!(y, [7.0, -2.0, 0.0, 3.0]);

        let dense = m.to_dense();
        let mut xt = [0.0; 3];
        m.rmatvec(&y, &mut xt);
        for j in 0..3 {
            let want: f64 = (0..4).map(|i| dense[[i, j]] * y[i]).sum();
            assert!((xt[j] - want).abs() < 1e-14);
        }
    }
}
