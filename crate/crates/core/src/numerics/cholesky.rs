use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
///
/// Only the lower triangle of the input is read.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dims(
                "cholesky",
                "square matrix",
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        let n = m.nrows();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut diag = m[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    /// Wraps an existing lower-triangular factor with positive diagonal.
    pub(crate) fn from_factor(l: DMatrix<f64>) -> Self {
        Self { l }
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_factor(self) -> DMatrix<f64> {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L X = B` in place.
    pub fn solve_lower_mut(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    /// Solves `Lᵀ X = B` in place.
    pub fn solve_upper_mut(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.dim() {
            return Err(Error::dims("cholesky solve", self.dim(), rhs.nrows()));
        }
        let mut x = rhs.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        Ok(x)
    }

    pub fn solve_vector(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.solve_matrix(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
        Ok(DVector::from_column_slice(x.as_slice()))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut x = DMatrix::identity(n, n);
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }
}

/// Returns `M⁻¹ rhs` together with `log |M|`.
pub fn cholesky_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = Cholesky::new(m)?;
    let x = chol.solve_matrix(rhs)?;
    Ok((x, chol.log_det()))
}
