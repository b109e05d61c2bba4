use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Terms of the Taylor series are summed until they fall below this
/// fraction of the partial sum (in the 1-norm).
const SERIES_TOL: f64 = 1e-16;
const MAX_TERMS: usize = 64;
/// The scaled argument satisfies `||A t / 2^s||_1 <= SCALED_NORM`.
const SCALED_NORM: f64 = 0.5;

pub(crate) fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^{A t}` by scaling and squaring around a truncated Taylor series.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::dims(
            "matrix_exponential",
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!("time {t} is not finite")));
    }
    let n = a.nrows();
    let at = a * t;
    let norm = norm1(&at);
    if !norm.is_finite() {
        return Err(Error::NumericalRange("matrix_exponential"));
    }

    let squarings = if norm > SCALED_NORM {
        (norm / SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    let scaled = at / 2f64.powi(squarings);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=MAX_TERMS {
        term = &term * &scaled / k as f64;
        result += &term;
        if norm1(&term) <= SERIES_TOL * norm1(&result) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }

    if result.iter().all(|v| v.is_finite()) {
        Ok(result)
    } else {
        Err(Error::NumericalRange("matrix_exponential"))
    }
}
