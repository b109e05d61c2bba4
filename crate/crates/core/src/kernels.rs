//! Covariance functions over time and Gram-matrix assembly.
//!
//! The physics kernel pushes independent squared-exponential input processes
//! through the Green's function of an [`LtiSystem`] and integrates the result
//! over both time axes with tensorized Gauss–Legendre quadrature.
//!
//! Gram matrices are ordered dimension-major: row `d * n + r` holds output
//! dimension `d` at time `times[r]`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{greens_lag, LtiSystem};
use crate::numerics::{gauss_legendre, mean_diagonal, symmetrize, QuadratureRule};

pub const DEFAULT_QUAD_NODES: usize = 32;
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-6;
/// Diagonal jitter relative to the mean Gram diagonal.
pub const GRAM_JITTER: f64 = 1e-8;
const ABS_QUAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub variance: f64,
    /// In µs.
    pub lengthscale: f64,
}

impl SeKernel {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || !(lengthscale > 0.0 && lengthscale.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "squared-exponential kernel needs positive variance and lengthscale, got {variance}, {lengthscale}"
            )));
        }
        Ok(Self {
            variance,
            lengthscale,
        })
    }

    #[inline]
    pub fn eval(&self, t: f64, t_prime: f64) -> f64 {
        let r = (t - t_prime) / self.lengthscale;
        self.variance * (-0.5 * r * r).exp()
    }
}

pub fn se_eval(k: &SeKernel, t: f64, t_prime: f64) -> f64 {
    k.eval(t, t_prime)
}

/// Output covariance of an LTI system driven by independent SE inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsKernel {
    system: LtiSystem,
    input_kernels: Vec<SeKernel>,
    quad_nodes: usize,
    convergence_tol: f64,
}

/// Quadrature nodes on `[0, t]` with `w_a G(t, τ_a)` precomputed.
struct GreensTable {
    nodes: Vec<f64>,
    /// One `N x p` matrix per input channel: entry `(a, i)` is `w_a G_{i,k}(t, τ_a)`.
    weighted: Vec<DMatrix<f64>>,
}

impl PhysicsKernel {
    pub fn new(
        system: LtiSystem,
        input_kernels: Vec<SeKernel>,
        quad_nodes: usize,
        convergence_tol: f64,
    ) -> Result<Self> {
        if input_kernels.len() != system.input_dim() {
            return Err(Error::dims(
                "physics kernel inputs",
                system.input_dim(),
                input_kernels.len(),
            ));
        }
        if quad_nodes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 quadrature nodes, got {quad_nodes}"
            )));
        }
        if !(convergence_tol > 0.0) {
            return Err(Error::InvalidArgument(
                "convergence tolerance must be positive".into(),
            ));
        }
        Ok(Self {
            system,
            input_kernels,
            quad_nodes,
            convergence_tol,
        })
    }

    pub fn with_defaults(system: LtiSystem, input_kernels: Vec<SeKernel>) -> Result<Self> {
        Self::new(
            system,
            input_kernels,
            DEFAULT_QUAD_NODES,
            DEFAULT_CONVERGENCE_TOL,
        )
    }

    pub fn system(&self) -> &LtiSystem {
        &self.system
    }

    pub fn input_kernels(&self) -> &[SeKernel] {
        &self.input_kernels
    }

    pub fn quad_nodes(&self) -> usize {
        self.quad_nodes
    }

    pub fn convergence_tol(&self) -> f64 {
        self.convergence_tol
    }

    pub fn output_dim(&self) -> usize {
        self.system.output_dim()
    }

    pub fn with_input_kernels(&self, input_kernels: Vec<SeKernel>) -> Result<Self> {
        Self::new(
            self.system.clone(),
            input_kernels,
            self.quad_nodes,
            self.convergence_tol,
        )
    }

    fn table(&self, rule: &QuadratureRule, t: f64) -> Result<GreensTable> {
        let p = self.system.output_dim();
        let m = self.system.input_dim();
        let n = rule.len();
        let mut nodes = Vec::with_capacity(n);
        let mut weighted = vec![DMatrix::zeros(n, p); m];
        for (a, (tau, w)) in rule.mapped(0.0, t).enumerate() {
            nodes.push(tau);
            let g = greens_lag(&self.system, (t - tau).max(0.0))?;
            for (k, wk) in weighted.iter_mut().enumerate() {
                for i in 0..p {
                    wk[(a, i)] = w * g[(i, k)];
                }
            }
        }
        Ok(GreensTable { nodes, weighted })
    }

    /// All `p x p` output covariances between the two tabulated times.
    fn block(&self, left: &GreensTable, right: &GreensTable) -> DMatrix<f64> {
        let p = self.system.output_dim();
        let mut out = DMatrix::zeros(p, p);
        for (k, ku) in self.input_kernels.iter().enumerate() {
            let cov = DMatrix::from_fn(left.nodes.len(), right.nodes.len(), |a, b| {
                ku.eval(left.nodes[a], right.nodes[b])
            });
            out += left.weighted[k].transpose() * cov * &right.weighted[k];
        }
        out
    }

    fn rules(&self) -> Result<(QuadratureRule, QuadratureRule)> {
        Ok((
            gauss_legendre(self.quad_nodes)?,
            gauss_legendre(2 * self.quad_nodes)?,
        ))
    }

    fn check(&self, coarse: f64, fine: f64) -> Result<()> {
        if (coarse - fine).abs() > self.convergence_tol * fine.abs() + ABS_QUAD_TOL {
            return Err(Error::Accuracy {
                coarse,
                fine,
                tol: self.convergence_tol,
            });
        }
        Ok(())
    }

    /// `k_ij(t, t')` with zero-based output indices. The value uses
    /// `quad_nodes` per axis and is checked against twice as many.
    pub fn eval(&self, i: usize, j: usize, t: f64, t_prime: f64) -> Result<f64> {
        let p = self.system.output_dim();
        if i >= p || j >= p {
            return Err(Error::InvalidArgument(format!(
                "output index ({i}, {j}) out of range for p = {p}"
            )));
        }
        check_time(t)?;
        check_time(t_prime)?;
        let (coarse_rule, fine_rule) = self.rules()?;
        let coarse = self.block(&self.table(&coarse_rule, t)?, &self.table(&coarse_rule, t_prime)?)
            [(i, j)];
        let fine =
            self.block(&self.table(&fine_rule, t)?, &self.table(&fine_rule, t_prime)?)[(i, j)];
        self.check(coarse, fine)?;
        Ok(coarse)
    }

    /// Unjittered Gram over `times`, dimension-major.
    fn raw_gram(&self, times: &[f64], checked: bool) -> Result<DMatrix<f64>> {
        let p = self.system.output_dim();
        let n = times.len();
        let (coarse_rule, fine_rule) = self.rules()?;
        let coarse: Vec<GreensTable> = times
            .par_iter()
            .map(|&t| self.table(&coarse_rule, t))
            .collect::<Result<_>>()?;
        let fine: Vec<GreensTable> = if checked {
            times
                .par_iter()
                .map(|&t| self.table(&fine_rule, t))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|r| (r..n).map(move |s| (r, s))).collect();
        let blocks: Vec<DMatrix<f64>> = pairs
            .par_iter()
            .map(|&(r, s)| {
                let b = self.block(&coarse[r], &coarse[s]);
                if checked {
                    let f = self.block(&fine[r], &fine[s]);
                    for (c, f) in b.iter().zip(f.iter()) {
                        self.check(*c, *f)?;
                    }
                }
                Ok(b)
            })
            .collect::<Result<_>>()?;

        let mut k = DMatrix::zeros(n * p, n * p);
        for (&(r, s), b) in pairs.iter().zip(&blocks) {
            for i in 0..p {
                for j in 0..p {
                    k[(i * n + r, j * n + s)] = b[(i, j)];
                    k[(j * n + s, i * n + r)] = b[(i, j)];
                }
            }
        }
        Ok(k)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time {t} must be finite and non-negative")));
    }
    Ok(())
}

fn check_grid(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidGrid("empty time grid".into()));
    }
    times.iter().try_for_each(|&t| check_time(t))
}

pub fn physics_eval(k: &PhysicsKernel, i: usize, j: usize, t: f64, t_prime: f64) -> Result<f64> {
    k.eval(i, j, t, t_prime)
}

/// Symmetric block Gram matrix over a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub times: Vec<f64>,
    pub block_dim: usize,
    pub matrix: DMatrix<f64>,
}

impl GramMatrix {
    fn finish(times: &[f64], block_dim: usize, raw: DMatrix<f64>) -> Self {
        let mut matrix = symmetrize(&raw);
        let jitter = GRAM_JITTER * mean_diagonal(&matrix);
        for d in 0..matrix.nrows() {
            matrix[(d, d)] += jitter;
        }
        Self {
            times: times.to_vec(),
            block_dim,
            matrix,
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn index(&self, dim: usize, time_index: usize) -> usize {
        dim * self.times.len() + time_index
    }

    /// `K_ij(T, T)`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.times.len();
        self.matrix.view((i * n, j * n), (n, n)).into_owned()
    }

    /// `K_ij` scaled to unit diagonal: `K_ij(t, t') / sqrt(K_ii(t, t) K_jj(t', t'))`.
    pub fn correlation_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.times.len();
        let b = self.block(i, j);
        DMatrix::from_fn(n, n, |r, s| {
            let scale = (self.matrix[(i * n + r, i * n + r)] * self.matrix[(j * n + s, j * n + s)])
                .sqrt();
            if scale > 0.0 {
                b[(r, s)] / scale
            } else {
                0.0
            }
        })
    }

    /// Dense CSV: a header row of times, then one row per time.
    pub fn block_to_csv(block: &DMatrix<f64>, times: &[f64]) -> String {
        let mut out = String::new();
        let header: Vec<String> = times.iter().map(|t| format!("t={t}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in block.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn write_block_csv(&self, path: &Path, i: usize, j: usize, normalize: bool) -> Result<()> {
        let block = if normalize {
            self.correlation_block(i, j)
        } else {
            self.block(i, j)
        };
        std::fs::write(path, Self::block_to_csv(&block, &self.times))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn gram_physics(k: &PhysicsKernel, times: &[f64]) -> Result<GramMatrix> {
    check_grid(times)?;
    let raw = k.raw_gram(times, true)?;
    Ok(GramMatrix::finish(times, k.output_dim(), raw))
}

/// Same as [`gram_physics`] without the node-doubling check.
pub fn gram_physics_unchecked(k: &PhysicsKernel, times: &[f64]) -> Result<GramMatrix> {
    check_grid(times)?;
    let raw = k.raw_gram(times, false)?;
    Ok(GramMatrix::finish(times, k.output_dim(), raw))
}

/// Block-diagonal Gram with one independent SE kernel per latent dimension.
pub fn gram_se_baseline(kernels: &[SeKernel], times: &[f64]) -> Result<GramMatrix> {
    check_grid(times)?;
    let n = times.len();
    let p = kernels.len();
    let mut raw = DMatrix::zeros(n * p, n * p);
    for (d, k) in kernels.iter().enumerate() {
        for r in 0..n {
            for s in 0..n {
                raw[(d * n + r, d * n + s)] = k.eval(times[r], times[s]);
            }
        }
    }
    Ok(GramMatrix::finish(times, p, raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Physics,
    SeBaseline,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Physics => "physics",
            KernelKind::SeBaseline => "se-baseline",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "physics" => Ok(KernelKind::Physics),
            "se-baseline" => Ok(KernelKind::SeBaseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel '{other}' (expected physics or se-baseline)"
            ))),
        }
    }
}

/// GP prior over the stacked latent states.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentPrior {
    Physics(PhysicsKernel),
    SeBaseline(Vec<SeKernel>),
}

impl LatentPrior {
    pub fn kind(&self) -> KernelKind {
        match self {
            LatentPrior::Physics(_) => KernelKind::Physics,
            LatentPrior::SeBaseline(_) => KernelKind::SeBaseline,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            LatentPrior::Physics(k) => k.output_dim(),
            LatentPrior::SeBaseline(ks) => ks.len(),
        }
    }

    pub fn gram(&self, times: &[f64]) -> Result<GramMatrix> {
        match self {
            LatentPrior::Physics(k) => gram_physics(k, times),
            LatentPrior::SeBaseline(ks) => gram_se_baseline(ks, times),
        }
    }

    fn se_kernels(&self) -> &[SeKernel] {
        match self {
            LatentPrior::Physics(k) => k.input_kernels(),
            LatentPrior::SeBaseline(ks) => ks,
        }
    }

    /// Trainable hyperparameters: `[ln σ², ln ℓ]` for each SE kernel.
    pub fn hyperparameters(&self) -> Vec<f64> {
        self.se_kernels()
            .iter()
            .flat_map(|k| [k.variance.ln(), k.lengthscale.ln()])
            .collect()
    }

    pub fn with_hyperparameters(&self, values: &[f64]) -> Result<Self> {
        let expected = 2 * self.se_kernels().len();
        if values.len() != expected {
            return Err(Error::dims("kernel hyperparameters", expected, values.len()));
        }
        let kernels = values
            .chunks(2)
            .map(|c| SeKernel::new(c[0].exp(), c[1].exp()))
            .collect::<Result<Vec<_>>>()?;
        Ok(match self {
            LatentPrior::Physics(k) => LatentPrior::Physics(k.with_input_kernels(kernels)?),
            LatentPrior::SeBaseline(_) => LatentPrior::SeBaseline(kernels),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Cholesky;

    fn integrator() -> LtiSystem {
        LtiSystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn se_zero_lag_and_unit_lag() {
        let k = SeKernel::new(2.5, 1.0).unwrap();
        assert_eq!(se_eval(&k, 3.0, 3.0), 2.5);
        let k = SeKernel::new(1.0, 1.0).unwrap();
        assert!((se_eval(&k, 0.0, 1.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((se_eval(&k, 0.0, 1.0) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn se_rejects_bad_hyperparameters() {
        assert!(SeKernel::new(0.0, 1.0).is_err());
        assert!(SeKernel::new(1.0, -1.0).is_err());
    }

    #[test]
    fn physics_zero_time_is_zero() {
        let k = PhysicsKernel::with_defaults(integrator(), vec![SeKernel::new(1.0, 1.0).unwrap()])
            .unwrap();
        assert_eq!(k.eval(0, 0, 0.0, 2.0).unwrap(), 0.0);
        assert_eq!(k.eval(0, 0, 2.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn physics_domain_errors() {
        let k = PhysicsKernel::with_defaults(integrator(), vec![SeKernel::new(1.0, 1.0).unwrap()])
            .unwrap();
        assert!(matches!(k.eval(0, 0, -1.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(k.eval(1, 0, 1.0, 2.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn physics_kernel_validates_construction() {
        let k = SeKernel::new(1.0, 1.0).unwrap();
        assert!(PhysicsKernel::new(integrator(), vec![k, k], 32, 1e-6).is_err());
        assert!(PhysicsKernel::new(integrator(), vec![k], 1, 1e-6).is_err());
    }

    #[test]
    fn too_few_nodes_fail_convergence() {
        // A 2-node rule cannot resolve a short lengthscale over a long window.
        let k = PhysicsKernel::new(integrator(), vec![SeKernel::new(1.0, 0.3).unwrap()], 2, 1e-6)
            .unwrap();
        assert!(matches!(k.eval(0, 0, 20.0, 20.0), Err(Error::Accuracy { .. })));
    }

    #[test]
    fn gram_at_time_zero_is_zero() {
        let k = PhysicsKernel::with_defaults(integrator(), vec![SeKernel::new(1.0, 1.0).unwrap()])
            .unwrap();
        let g = gram_physics(&k, &[0.0]).unwrap();
        assert_eq!(g.matrix.shape(), (1, 1));
        assert!(g.matrix[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn se_baseline_gram_analytic() {
        let k = SeKernel::new(1.0, 2.0).unwrap();
        let g = gram_se_baseline(&[k, k], &[0.0, 2.0]).unwrap();
        let e = (-0.5f64).exp();
        let jitter = GRAM_JITTER;
        for d in 0..2 {
            let b = g.block(d, d);
            assert!((b[(0, 0)] - 1.0 - jitter).abs() < 1e-15);
            assert!((b[(0, 1)] - e).abs() < 1e-15);
            assert!((b[(1, 0)] - e).abs() < 1e-15);
        }
        assert!(g.block(0, 1).iter().all(|&v| v == 0.0));
        assert!(g.block(1, 0).iter().all(|&v| v == 0.0));
        Cholesky::new(&g.matrix).unwrap();
    }

    #[test]
    fn correlation_block_has_unit_diagonal() {
        let k = SeKernel::new(3.0, 2.0).unwrap();
        let g = gram_se_baseline(&[k], &[1.0, 2.0, 4.0]).unwrap();
        let c = g.correlation_block(0, 0);
        for r in 0..3 {
            assert!((c[(r, r)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_kind_parses() {
        assert_eq!("physics".parse::<KernelKind>().unwrap(), KernelKind::Physics);
        assert_eq!(
            "se-baseline".parse::<KernelKind>().unwrap(),
            KernelKind::SeBaseline
        );
        assert!("matern".parse::<KernelKind>().is_err());
    }

    #[test]
    fn hyperparameter_round_trip() {
        let prior = LatentPrior::SeBaseline(vec![
            SeKernel::new(1.5, 3.0).unwrap(),
            SeKernel::new(0.5, 2.0).unwrap(),
        ]);
        let h = prior.hyperparameters();
        assert_eq!(h.len(), 4);
        let back = prior.with_hyperparameters(&h).unwrap();
        match back {
            LatentPrior::SeBaseline(ks) => {
                assert!((ks[0].variance - 1.5).abs() < 1e-14);
                assert!((ks[1].lengthscale - 2.0).abs() < 1e-14);
            }
            _ => unreachable!(),
        }
    }
}
