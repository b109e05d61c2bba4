//! Python bindings: kernels, GP conditioning, data generation and trained models.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use pegp_vae::config::ExperimentConfig;
use pegp_vae::datagen::{generate_dataset, DatasetConfig, VideoSequence};
use pegp_vae::gp::{condition as gp_condition, GpPosterior, PseudoObservations};
use pegp_vae::kernels::{gram_physics, gram_se_baseline, GramMatrix, KernelKind, LatentPrior};
use pegp_vae::numerics::RngStream;
use pegp_vae::vae::{self, Checkpoint};
use pegp_vae::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Per-dimension `(mean, std)` series, each `block_dim x n_times`.
fn split(post: &GpPosterior) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = post.n_times();
    let per_dim = |f: &dyn Fn(usize, usize) -> f64| (0..post.block_dim).map(|d| (0..n).map(|r| f(d, r)).collect()).collect();
    (per_dim(&|d, r| post.mean_at(d, r)), per_dim(&|d, r| post.std_at(d, r)))
}

/// Cross-covariance of the mechanical latent positions.
#[pyclass(name = "PhysicsKernel")]
struct PyPhysicsKernel {
    prior: LatentPrior,
}

#[pymethods]
impl PyPhysicsKernel {
    /// Kernel of the default experiment: damped oscillators driven by SE forces.
    #[new]
    fn new() -> PyResult<Self> {
        let prior = ExperimentConfig::default().prior(KernelKind::Physics).map_err(to_py)?;
        Ok(Self { prior })
    }

    fn eval(&self, i: usize, j: usize, t: f64, t_prime: f64) -> PyResult<f64> {
        match &self.prior {
            LatentPrior::Physics(k) => k.eval(i, j, t, t_prime).map_err(to_py),
            LatentPrior::SeBaseline(_) => unreachable!(),
        }
    }

    /// Gram matrix in dimension-major order (`d * n + r`).
    fn gram(&self, times: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let LatentPrior::Physics(k) = &self.prior else { unreachable!() };
        Ok(rows(&gram_physics(k, &times).map_err(to_py)?.matrix))
    }

    #[getter]
    fn natural_frequencies(&self) -> Vec<f64> {
        let p = DatasetConfig::default().oscillator;
        (0..2).map(|a| p.omega(a)).collect()
    }
}

#[pyfunction]
fn se_gram(variance: f64, lengthscale: f64, times: Vec<f64>, dims: usize) -> PyResult<Vec<Vec<f64>>> {
    let k = pegp_vae::kernels::SeKernel::new(variance, lengthscale).map_err(to_py)?;
    Ok(rows(&gram_se_baseline(&vec![k; dims], &times).map_err(to_py)?.matrix))
}

/// Conditions a dimension-major Gram over `query_times` on pseudo-observations
/// at the first `len(times)` of them. Returns `(mean, cov)`.
#[pyfunction]
fn condition(
    gram: Vec<Vec<f64>>,
    query_times: Vec<f64>,
    times: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let matrix = from_rows(&gram)?;
    if query_times.is_empty() || matrix.nrows() % query_times.len() != 0 {
        return Err(PyValueError::new_err("Gram size is not a multiple of the number of query times"));
    }
    let block_dim = matrix.nrows() / query_times.len();
    let prior = GramMatrix {
        times: query_times,
        block_dim,
        matrix,
    };
    let obs = PseudoObservations::new(times, DVector::from_vec(mu), DVector::from_vec(sigma)).map_err(to_py)?;
    let post = gp_condition(&prior, &obs).map_err(to_py)?;
    Ok((post.mean.iter().copied().collect(), rows(&post.cov)))
}

/// Binary video of one bouncing ball.
#[pyclass(name = "Sequence")]
#[derive(Clone)]
struct PySequence {
    inner: VideoSequence,
    /// `2 x n_frames` true latent positions, when known.
    #[pyo3(get)]
    positions: Option<Vec<Vec<f64>>>,
}

#[pymethods]
impl PySequence {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: VideoSequence::load(&path).map_err(to_py)?,
            positions: None,
        })
    }

    #[getter]
    fn pixels(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn times(&self) -> Vec<f64> {
        self.inner.timestamps()
    }

    /// Row-major `d x d` frames with values 0 or 1.
    fn frames(&self) -> Vec<Vec<u8>> {
        (0..self.inner.n_frames).map(|i| self.inner.frame(i).to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_frames
    }
}

/// Sequences from the default generator, stream `offset + i` of `seed`.
#[pyfunction]
#[pyo3(signature = (n, seed, offset = 0))]
fn generate(n: usize, seed: u64, offset: u64) -> PyResult<Vec<PySequence>> {
    let cfg = DatasetConfig::default();
    let data = generate_dataset(n, &cfg, &RngStream::new(seed), offset).map_err(to_py)?;
    data.into_iter()
        .map(|(seq, truth)| {
            let pos = truth.positions(&seq.timestamps()).map_err(to_py)?;
            Ok(PySequence {
                inner: seq,
                positions: Some(rows(&pos.transpose())),
            })
        })
        .collect()
}

/// Trained encoder, decoder and latent prior.
#[pyclass(name = "Model")]
struct PyModel {
    inner: vae::Model,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint; `config` supplies the kernel settings it was trained with.
    #[staticmethod]
    #[pyo3(signature = (checkpoint, config = None))]
    fn load(checkpoint: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match config {
            Some(p) => ExperimentConfig::load(&p).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        let ckpt = Checkpoint::load(&checkpoint).map_err(to_py)?;
        let prior = cfg.prior(ckpt.kind).map_err(to_py)?;
        Ok(Self {
            inner: ckpt.model(&prior).map_err(to_py)?,
        })
    }

    /// Randomly initialized model of the given kernel ("physics" or "se-baseline").
    #[staticmethod]
    #[pyo3(signature = (kernel, hidden = 500, seed = 0))]
    fn seeded(kernel: &str, hidden: usize, seed: u64) -> PyResult<Self> {
        let kind: KernelKind = kernel.parse().map_err(to_py)?;
        let cfg = ExperimentConfig::default();
        let prior = cfg.prior(kind).map_err(to_py)?;
        Ok(Self {
            inner: vae::Model::seeded(prior, cfg.pixels * cfg.pixels, hidden, seed),
        })
    }

    #[getter]
    fn kernel(&self) -> &'static str {
        self.inner.prior.kind().name()
    }

    /// `(mean, std, frames)`: latent posterior per dimension and decoded pixel probabilities.
    fn reconstruct(&self, seq: &PySequence) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let rec = vae::reconstruct(&seq.inner, &self.inner).map_err(to_py)?;
        let (mean, std) = split(&rec.posterior);
        Ok((mean, std, rows(&rec.frames)))
    }

    /// `(times, mean, std)` up to `horizon`, conditioned on the observed frames only.
    fn extrapolate(&self, seq: &PySequence, horizon: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let post = vae::extrapolate(&seq.inner, &self.inner, horizon).map_err(to_py)?;
        let (mean, std) = split(&post);
        Ok((post.query_times, mean, std))
    }

    /// Single-sample ELBO estimate with the given noise seed.
    fn elbo(&self, seq: &PySequence, seed: u64) -> PyResult<f64> {
        let e = vae::elbo(&seq.inner, &self.inner, 1, &mut RngStream::new(seed)).map_err(to_py)?;
        Ok(e.total)
    }
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    pegp_vae::cli::run(std::iter::once("pegp".to_string()).chain(args))
}

#[pymodule]
fn pegp_vae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPhysicsKernel>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(se_gram, m)?)?;
    m.add_function(wrap_pyfunction!(condition, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
