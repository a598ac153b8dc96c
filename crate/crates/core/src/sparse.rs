use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Weighted sparse operator in CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != n_rows + 1
            || indices.len() != values.len()
            || offsets.last().copied() != Some(indices.len())
            || offsets.windows(2).any(|w| w[0] > w[1])
            || indices.iter().any(|&j| j >= n_cols)
        {
            return Err(Error::invalid("malformed CSR matrix"));
        }
        Ok(Self {
            n_rows,
            n_cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs stored for row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> NdArray {
        let mut out = NdArray::zeros(&[self.n_rows, self.n_cols]);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                out.set(r, c, out.get(r, c) + v);
            }
        }
        out
    }

    /// `self · x` for a dense matrix `x`.
    pub fn spmm(&self, x: &NdArray) -> Result<NdArray> {
        if !x.is_matrix() || x.rows() != self.n_cols {
            return Err(Error::shape("spmm", &[self.n_rows, self.n_cols], x.shape()));
        }
        let c = x.cols();
        let mut out = vec![0.0; self.n_rows * c];
        for r in 0..self.n_rows {
            let out_row = &mut out[r * c..(r + 1) * c];
            for (j, v) in self.row(r) {
                for (o, &xv) in out_row.iter_mut().zip(x.row(j)) {
                    *o += v * xv;
                }
            }
        }
        NdArray::matrix(self.n_rows, c, out)
    }

    /// `selfᵀ · x` without materializing the transpose.
    pub fn spmm_t(&self, x: &NdArray) -> Result<NdArray> {
        if !x.is_matrix() || x.rows() != self.n_rows {
            return Err(Error::shape("spmm_t", &[self.n_rows, self.n_cols], x.shape()));
        }
        let c = x.cols();
        let mut out = vec![0.0; self.n_cols * c];
        for r in 0..self.n_rows {
            let x_row = x.row(r);
            for (j, v) in self.row(r) {
                let out_row = &mut out[j * c..(j + 1) * c];
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o += v * xv;
                }
            }
        }
        NdArray::matrix(self.n_cols, c, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spmm_matches_dense() {
        let a = CsrMatrix::new(2, 3, vec![0, 2, 3], vec![0, 2, 1], vec![1.0, 2.0, -1.0]).unwrap();
        let x = NdArray::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let dense = a.to_dense();
        assert_eq!(a.spmm(&x).unwrap(), dense.matmul(&x).unwrap());
        let y = NdArray::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(a.spmm_t(&y).unwrap(), dense.t_matmul(&y).unwrap());
    }

    #[test]
    fn rejects_bad_layout() {
        assert!(CsrMatrix::new(2, 2, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 1], vec![5], vec![1.0]).is_err());
    }
}
