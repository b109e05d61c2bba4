//! Exact GP conditioning on heteroscedastic pseudo-observations.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::numerics::{symmetrize, Cholesky, RngStream};

/// Absolute diagonal jitter added before factorizing a posterior covariance for sampling.
pub const SAMPLE_JITTER: f64 = 1e-10;

/// Gaussian surrogate observations `(μ*, σ*)` produced by the encoder.
///
/// Both vectors are dimension-major over `times`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoObservations {
    pub times: Vec<f64>,
    pub mu_star: DVector<f64>,
    pub sigma_star: DVector<f64>,
}

impl PseudoObservations {
    pub fn new(times: Vec<f64>, mu_star: DVector<f64>, sigma_star: DVector<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("no observation times".into()));
        }
        if mu_star.len() != sigma_star.len() || mu_star.len() % times.len() != 0 {
            return Err(Error::dims(
                "pseudo-observations",
                format!("multiple of {} entries in both vectors", times.len()),
                format!("{} and {}", mu_star.len(), sigma_star.len()),
            ));
        }
        if sigma_star.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "pseudo-observation standard deviations must be positive and finite".into(),
            ));
        }
        if mu_star.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("pseudo-observation means must be finite".into()));
        }
        Ok(Self {
            times,
            mu_star,
            sigma_star,
        })
    }

    pub fn block_dim(&self) -> usize {
        self.mu_star.len() / self.times.len()
    }

    pub fn len(&self) -> usize {
        self.mu_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_star.is_empty()
    }
}

/// Joint Gaussian over the latent states at `query_times` (dimension-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub query_times: Vec<f64>,
    pub block_dim: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GpPosterior {
    pub fn n_times(&self) -> usize {
        self.query_times.len()
    }

    pub fn std(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn mean_at(&self, dim: usize, time_index: usize) -> f64 {
        self.mean[dim * self.n_times() + time_index]
    }

    pub fn std_at(&self, dim: usize, time_index: usize) -> f64 {
        let k = dim * self.n_times() + time_index;
        self.cov[(k, k)].max(0.0).sqrt()
    }

    /// Latent mean as an `n_times x p` matrix (one row per time).
    pub fn mean_frames(&self) -> DMatrix<f64> {
        let n = self.n_times();
        DMatrix::from_fn(n, self.block_dim, |r, d| self.mean[d * n + r])
    }

    /// CSV with columns `time,dim,mean,std`; `dim` counts from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,dim,mean,std\n");
        for d in 0..self.block_dim {
            for (r, t) in self.query_times.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{t},{},{:.12e},{:.12e}",
                    d + 1,
                    self.mean_at(d, r),
                    self.std_at(d, r)
                );
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn time_index(times: &[f64], t: f64) -> Option<usize> {
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-9 * s.abs().max(1.0))
}

/// Indices into the prior Gram of each pseudo-observation entry.
fn observation_indices(prior: &GramMatrix, obs: &PseudoObservations) -> Result<Vec<usize>> {
    if obs.block_dim() != prior.block_dim {
        return Err(Error::Alignment(format!(
            "observations carry {} dimensions, prior {}",
            obs.block_dim(),
            prior.block_dim
        )));
    }
    let rows: Vec<usize> = obs
        .times
        .iter()
        .map(|&t| {
            time_index(&prior.times, t)
                .ok_or_else(|| Error::Alignment(format!("observation time {t} not in prior grid")))
        })
        .collect::<Result<_>>()?;
    let mut seen = vec![false; prior.times.len()];
    for &r in &rows {
        if std::mem::replace(&mut seen[r], true) {
            return Err(Error::Alignment(format!(
                "duplicate observation time {}",
                prior.times[r]
            )));
        }
    }
    Ok((0..prior.block_dim)
        .flat_map(|d| rows.iter().map(move |&r| prior.index(d, r)))
        .collect())
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn noisy_block(prior: &GramMatrix, obs: &PseudoObservations, idx: &[usize]) -> DMatrix<f64> {
    let mut a = select(&prior.matrix, idx, idx);
    for (k, s) in obs.sigma_star.iter().enumerate() {
        a[(k, k)] += s * s;
    }
    a
}

/// Posterior over every time of `prior` given pseudo-observations at a subset of them.
pub fn condition(prior: &GramMatrix, obs: &PseudoObservations) -> Result<GpPosterior> {
    let idx = observation_indices(prior, obs)?;
    let chol = Cholesky::new(&noisy_block(prior, obs, &idx))?;
    let all: Vec<usize> = (0..prior.len()).collect();
    let k_tq = select(&prior.matrix, &idx, &all);

    let alpha = chol.solve_vector(&obs.mu_star)?;
    let mean = k_tq.tr_mul(&alpha);

    let mut v = k_tq;
    chol.solve_lower_mut(&mut v);
    let mut cov = symmetrize(&(&prior.matrix - v.tr_mul(&v)));
    for d in 0..cov.nrows() {
        if cov[(d, d)] < 0.0 {
            cov[(d, d)] = 0.0;
        }
    }
    Ok(GpPosterior {
        query_times: prior.times.clone(),
        block_dim: prior.block_dim,
        mean,
        cov,
    })
}

/// `log N(μ* | 0, K + Σ*)` with `Σ* = diag(σ*²)`.
pub fn log_marginal(prior: &GramMatrix, obs: &PseudoObservations) -> Result<f64> {
    let idx = observation_indices(prior, obs)?;
    let chol = Cholesky::new(&noisy_block(prior, obs, &idx))?;
    let alpha = chol.solve_vector(&obs.mu_star)?;
    let n = obs.len() as f64;
    Ok(-0.5 * (obs.mu_star.dot(&alpha) + chol.log_det() + n * (2.0 * PI).ln()))
}

/// A reparameterized draw `y = mean + L ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub y: DVector<f64>,
    pub eps: DVector<f64>,
}

pub fn sample_posterior(post: &GpPosterior, rng: &mut RngStream) -> Result<PosteriorSample> {
    let n = post.mean.len();
    let eps = DVector::from_vec(rng.gaussian_draws(n));
    if post.cov.iter().all(|&v| v == 0.0) {
        return Ok(PosteriorSample {
            y: post.mean.clone(),
            eps,
        });
    }
    let mut jittered = post.cov.clone();
    for d in 0..n {
        jittered[(d, d)] += SAMPLE_JITTER;
    }
    let chol = Cholesky::new(&jittered)?;
    let y = &post.mean + chol.factor() * &eps;
    Ok(PosteriorSample { y, eps })
}

/// Reverse-mode adjoint of `S = L Lᵀ`: maps `∂f/∂L` to the symmetric `∂f/∂S`.
pub(crate) fn cholesky_adjoint(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // Only the lower triangle of L is free.
    let mut l_bar = l_bar.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            l_bar[(i, j)] = 0.0;
        }
    }
    // P = Φ(Lᵀ L̄): lower triangle with the diagonal halved.
    let mut p = l.tr_mul(&l_bar);
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // S̄ = L⁻ᵀ P L⁻¹, symmetrized.
    let chol = Cholesky::from_factor(l.clone());
    let mut x = p.transpose();
    chol.solve_upper_mut(&mut x);
    let mut s = x.transpose();
    chol.solve_upper_mut(&mut s);
    symmetrize(&s)
}
