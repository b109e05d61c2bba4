//! Dense linear algebra, quadrature and random numbers shared by every model component.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; the decompositions used by the model
//! (matrix exponential, Cholesky) are implemented here so their error behaviour
//! is under our control.

mod cholesky;
mod expm;
mod quadrature;
mod rng;

pub use cholesky::{cholesky_solve, Cholesky};
pub use expm::matrix_exponential;
pub use quadrature::{gauss_legendre, QuadratureRule};
pub use rng::{gaussian_draws, RngState, RngStream};

pub use nalgebra::{DMatrix, DVector};


/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.diagonal().sum() / m.nrows() as f64
}
