//! Explicit dense matrix operator, used for small systems and oracles.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::operators::svd::TruncatedSvd;
use crate::operators::GridShape;

pub struct DenseOp {
    matrix: Array2<f64>,
    domain: GridShape,
    tau: f64,
    svd: OnceLock<TruncatedSvd>,
}

impl std::fmt::Debug for DenseOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseOp")
            .field("shape", &self.matrix.dim())
            .field("factorized", &self.svd.get().is_some())
            .finish()
    }
}

impl DenseOp {
    pub fn new(matrix: Array2<f64>, domain: GridShape, tau: f64) -> Result<Self> {
        if matrix.ncols() != domain.len() {
            return Err(Error::dimension(
                format!("matrix with {} columns", domain.len()),
                format!("{} columns", matrix.ncols()),
            ));
        }
        Ok(DenseOp {
            matrix,
            domain,
            tau,
            svd: OnceLock::new(),
        })
    }

    /// Treat the domain as a flat 1 x 1 x n image.
    pub fn from_matrix(matrix: Array2<f64>, tau: f64) -> Self {
        let n = matrix.ncols();
        DenseOp {
            matrix,
            domain: GridShape::new(1, 1, n),
            tau,
            svd: OnceLock::new(),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn domain(&self) -> GridShape {
        self.domain
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn range_len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn factorize(&self) -> Result<&TruncatedSvd> {
        if let Some(svd) = self.svd.get() {
            return Ok(svd);
        }
        let svd = TruncatedSvd::factor(&self.matrix, self.tau)?;
        Ok(self.svd.get_or_init(|| svd))
    }

    pub fn svd(&self) -> Result<&TruncatedSvd> {
        self.svd.get().ok_or_else(|| {
            Error::State("dense pseudoinverse requested before svd factorization".into())
        })
    }

    pub fn apply(&self, x: &Array3<f64>) -> Array1<f64> {
        let flat = Array1::from_iter(x.iter().copied());
        self.matrix.dot(&flat)
    }

    pub fn adjoint(&self, y: &Array1<f64>) -> Array3<f64> {
        let x = self.matrix.t().dot(y);
        self.domain.reshape(x)
    }
}
