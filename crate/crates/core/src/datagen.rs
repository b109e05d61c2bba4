//! Synthetic oscillating-particle videos.
//!
//! Each sequence draws two independent force signals from a squared-exponential
//! GP, drives the damped two-axis oscillator with them from rest, and renders
//! the particle position as a thresholded Gaussian blob. The latent trajectory
//! and forces are kept as ground truth in a separate CSV file.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{PhysicsKernel, SeKernel};
use crate::lti::{simulate_fine, LatentTrajectory, LtiSystem, MatrixSlot, PhiBinding, SampledInput};
use crate::numerics::{Cholesky, RngStream};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"PEGV";
pub const SEQUENCE_VERSION: u16 = 1;

/// Resonance frequencies (kHz) and damping ratios of the two axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillatorParams {
    pub freq_khz: [f64; 2],
    pub damping: [f64; 2],
}

impl Default for OscillatorParams {
    fn default() -> Self {
        Self {
            freq_khz: [47.7, 63.6],
            damping: [0.02, 0.01],
        }
    }
}

impl OscillatorParams {
    /// Natural angular frequency in rad/µs.
    pub fn omega(&self, axis: usize) -> f64 {
        2.0 * PI * self.freq_khz[axis] * 1e-3
    }

    /// Stiffness `c = ω₀²` in 1/µs².
    pub fn stiffness(&self, axis: usize) -> f64 {
        self.omega(axis).powi(2)
    }

    /// Damping coefficient `d = 2 ζ ω₀` in 1/µs.
    pub fn damping_coefficient(&self, axis: usize) -> f64 {
        2.0 * self.damping[axis] * self.omega(axis)
    }
}

/// Two decoupled damped oscillators; state `[y1, y2, ẏ1, ẏ2]`, force on each velocity.
///
/// The stiffness and damping entries of `A` are exposed as free parameters.
pub fn build_experiment_system(params: &OscillatorParams) -> LtiSystem {
    let (c1, c2) = (params.stiffness(0), params.stiffness(1));
    let (d1, d2) = (params.damping_coefficient(0), params.damping_coefficient(1));
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
        -c1, 0.0, -d1, 0.0,
        0.0, -c2, 0.0, -d2,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 2, &[
        0.0, 0.0,
        0.0, 0.0,
        1.0, 0.0,
        0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let c = DMatrix::from_row_slice(2, 4, &[
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    ]);
    let bind = |name: &str, row, col| PhiBinding {
        name: name.into(),
        matrix: MatrixSlot::A,
        row,
        col,
    };
    LtiSystem::new(a, b, c)
        .and_then(|s| {
            s.with_bindings(vec![
                bind("neg_c1", 2, 0),
                bind("neg_c2", 3, 1),
                bind("neg_d1", 2, 2),
                bind("neg_d2", 3, 3),
            ])
        })
        .expect("experiment system is well formed")
}

/// Pixel geometry: latent workspace `[-w, w]²` mapped onto a `d x d` frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub d: usize,
    pub workspace: f64,
    /// Blob radius in pixels.
    pub blob_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            d: 40,
            workspace: 3.0,
            blob_radius: 1.5,
        }
    }
}

impl RenderConfig {
    /// Continuous `(row, col)` pixel coordinates of a latent position.
    /// `y1` runs left to right, `y2` bottom to top.
    pub fn pixel_center(&self, y: &[f64]) -> (f64, f64) {
        let scale = self.d as f64 / (2.0 * self.workspace);
        let col = (y[0] + self.workspace) * scale;
        let row = (self.workspace - y[1]) * scale;
        (row, col)
    }
}

/// Thresholded Gaussian blob, row-major `d²` pixels in `{0, 1}`.
pub fn render_frame(y: &[f64], cfg: &RenderConfig) -> Vec<u8> {
    let d = cfg.d;
    let mut frame = vec![0u8; d * d];
    if y.len() < 2 || !y[0].is_finite() || !y[1].is_finite() {
        return frame;
    }
    let (row, col) = cfg.pixel_center(y);
    let two_rho2 = 2.0 * cfg.blob_radius * cfg.blob_radius;
    // exp(-r²/2ρ²) >= 1/2  <=>  r² <= 2ρ² ln 2
    let r2_max = two_rho2 * std::f64::consts::LN_2;
    let reach = r2_max.sqrt().ceil() as i64 + 1;
    let (r0, c0) = (row.round() as i64, col.round() as i64);
    for r in (r0 - reach)..=(r0 + reach) {
        for c in (c0 - reach)..=(c0 + reach) {
            if r < 0 || c < 0 || r >= d as i64 || c >= d as i64 {
                continue;
            }
            let dist2 = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
            if (-dist2 / two_rho2).exp() >= 0.5 {
                frame[r as usize * d + c as usize] = 1;
            }
        }
    }
    frame
}

/// Draws from independent zero-mean SE processes on a fixed grid.
#[derive(Debug, Clone)]
pub struct ForceSampler {
    grid: Vec<f64>,
    factors: Vec<DMatrix<f64>>,
}

/// Jitter relative to each kernel's variance.
const FORCE_JITTER: f64 = 1e-8;

impl ForceSampler {
    pub fn new(kernels: &[SeKernel], grid: &[f64]) -> Result<Self> {
        if grid.len() >= 2 {
            let h = grid[1] - grid[0];
            if grid
                .windows(2)
                .any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1.0) || w[1] <= w[0])
            {
                return Err(Error::InvalidGrid("force grid must be equidistant".into()));
            }
        }
        let factors = kernels
            .iter()
            .map(|k| {
                let mut m = DMatrix::from_fn(grid.len(), grid.len(), |a, b| k.eval(grid[a], grid[b]));
                for i in 0..grid.len() {
                    m[(i, i)] += FORCE_JITTER * k.variance;
                }
                Cholesky::new(&m).map(Cholesky::into_factor)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grid: grid.to_vec(),
            factors,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// `m x K` forces, one row per input.
    pub fn sample(&self, rng: &mut RngStream) -> DMatrix<f64> {
        let k = self.grid.len();
        let mut out = DMatrix::zeros(self.factors.len(), k);
        for (i, l) in self.factors.iter().enumerate() {
            let eps = DVector::from_vec(rng.gaussian_draws(k));
            out.set_row(i, &(l * eps).transpose());
        }
        out
    }
}

pub fn sample_forces(rng: &mut RngStream, kernels: &[SeKernel], grid: &[f64]) -> Result<DMatrix<f64>> {
    Ok(ForceSampler::new(kernels, grid)?.sample(rng))
}

/// Binary frames with timestamps `(i + 1)·dt`, `i = 0..n_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub d: usize,
    pub n_frames: usize,
    pub dt: f64,
    /// Row-major, `n_frames · d²` bytes in `{0, 1}`.
    pub pixels: Vec<u8>,
}

impl VideoSequence {
    pub fn new(d: usize, dt: f64, frames: Vec<Vec<u8>>) -> Result<Self> {
        if frames.iter().any(|f| f.len() != d * d) {
            return Err(Error::dims("video frame", d * d, "other length"));
        }
        if frames.iter().flatten().any(|&p| p > 1) {
            return Err(Error::InvalidArgument("frames must be binary".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("frame spacing must be positive".into()));
        }
        Ok(Self {
            d,
            n_frames: frames.len(),
            dt,
            pixels: frames.concat(),
        })
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.n_frames).map(|i| (i + 1) as f64 * self.dt).collect()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.d * self.d;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `n_frames x d²` matrix of 0.0/1.0.
    pub fn frames_matrix(&self) -> DMatrix<f64> {
        let n = self.d * self.d;
        DMatrix::from_fn(self.n_frames, n, |r, c| self.pixels[r * n + c] as f64)
    }

    /// The first `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_frames);
        Self {
            d: self.d,
            n_frames: n,
            dt: self.dt,
            pixels: self.pixels[..n * self.d * self.d].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.pixels.len());
        out.extend_from_slice(SEQUENCE_MAGIC);
        out.extend_from_slice(&SEQUENCE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u16).to_le_bytes());
        out.extend_from_slice(&(self.n_frames as u16).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::format("sequence file", detail);
        if bytes.len() < 18 || &bytes[..4] != SEQUENCE_MAGIC {
            return Err(bad("missing PEGV header"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16_at(4);
        if version != SEQUENCE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let d = u16_at(6) as usize;
        let n_frames = u16_at(8) as usize;
        let dt = f64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
        let pixels = bytes[18..].to_vec();
        if pixels.len() != n_frames * d * d {
            return Err(bad(&format!(
                "expected {} pixel bytes, found {}",
                n_frames * d * d,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(bad("non-binary pixel"));
        }
        Ok(Self {
            d,
            n_frames,
            dt,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Binary PGM (`P5`) of `d x d` intensities in `[0, 1]`.
pub fn pgm_bytes(d: usize, intensities: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{d} {d}\n255\n").into_bytes();
    out.extend(
        intensities
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, d: usize, intensities: &[f64]) -> Result<()> {
    std::fs::write(path, pgm_bytes(d, intensities)).map_err(|e| Error::io(path, e))
}

/// Latent path and forces on the fine simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub latent: LatentTrajectory,
    /// `m x T`, the held force value at each fine time (the last repeats).
    pub forces: DMatrix<f64>,
}

impl GroundTruth {
    /// Latent position at time `t`, which must lie on the fine grid.
    pub fn position_at(&self, t: f64) -> Result<DVector<f64>> {
        let times = &self.latent.times;
        let h = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        let k = ((t - times[0]) / h).round();
        if k < 0.0 || k as usize >= times.len() || (times[k as usize] - t).abs() > 1e-6 * h {
            return Err(Error::NotFound(format!("time {t} not on ground-truth grid")));
        }
        Ok(self.latent.outputs.column(k as usize).into_owned())
    }

    /// `n x p` positions at `times`.
    pub fn positions(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.latent.outputs.nrows();
        let mut out = DMatrix::zeros(times.len(), p);
        for (r, &t) in times.iter().enumerate() {
            out.set_row(r, &self.position_at(t)?.transpose());
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let p = self.latent.outputs.nrows();
        let m = self.forces.nrows();
        let mut out = String::from("time");
        for i in 1..=p {
            let _ = write!(out, ",y{i}");
        }
        for i in 1..=m {
            let _ = write!(out, ",u{i}");
        }
        out.push('\n');
        for (k, t) in self.latent.times.iter().enumerate() {
            let _ = write!(out, "{t:.6}");
            for i in 0..p {
                let _ = write!(out, ",{:.17e}", self.latent.outputs[(i, k)]);
            }
            for i in 0..m {
                let _ = write!(out, ",{:.17e}", self.forces[(i, k)]);
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV written by [`GroundTruth::to_csv`]. Only outputs and
    /// forces are stored, so `latent.states` comes back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("ground-truth csv", d);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let p = cols.iter().filter(|c| c.starts_with('y')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        if cols.first() != Some(&"time") || p + m + 1 != cols.len() {
            return Err(bad(format!("unexpected header {header}")));
        }
        let mut times = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?;
            if vals.len() != cols.len() {
                return Err(bad(format!("line {} has {} fields", ln + 2, vals.len())));
            }
            times.push(vals[0]);
            rows.push(vals[1..].to_vec());
        }
        let t = times.len();
        let outputs = DMatrix::from_fn(p, t, |i, k| rows[k][i]);
        let forces = DMatrix::from_fn(m, t, |i, k| rows[k][p + i]);
        Ok(Self {
            latent: LatentTrajectory {
                times,
                states: DMatrix::zeros(0, t),
                outputs,
            },
            forces,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Everything that determines a generated dataset apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub oscillator: OscillatorParams,
    pub render: RenderConfig,
    pub n_frames: usize,
    /// µs between frames.
    pub dt: f64,
    /// µs between force samples.
    pub fine_dt: f64,
    /// Ground truth is simulated on `[0, truth_horizon]`.
    pub truth_horizon: f64,
    pub force_lengthscale: f64,
    /// Per-input force variances; `None` means calibrate.
    pub force_variance: Option<[f64; 2]>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            oscillator: OscillatorParams::default(),
            render: RenderConfig::default(),
            n_frames: 30,
            dt: 1.0,
            fine_dt: 0.1,
            truth_horizon: 50.0,
            force_lengthscale: 5.0,
            force_variance: None,
        }
    }
}

impl DatasetConfig {
    pub fn clip_duration(&self) -> f64 {
        self.n_frames as f64 * self.dt
    }

    /// Force variances making each axis' positional std equal `workspace / 3`
    /// at the end of the clip.
    ///
    /// The output variance is linear in the input variance, and in the
    /// experiment system output `i` is driven by input `i` only, so a unit-variance
    /// evaluation of the physics kernel fixes each variance in closed form.
    pub fn calibrated_force_variance(&self) -> Result<[f64; 2]> {
        let system = build_experiment_system(&self.oscillator);
        let unit = SeKernel::new(1.0, self.force_lengthscale)?;
        let kernel = PhysicsKernel::with_defaults(system, vec![unit, unit])?;
        let t = self.clip_duration();
        let target = (self.render.workspace / 3.0).powi(2);
        Ok([
            target / kernel.eval(0, 0, t, t)?,
            target / kernel.eval(1, 1, t, t)?,
        ])
    }

    pub fn resolved_force_variance(&self) -> Result<[f64; 2]> {
        match self.force_variance {
            Some(v) => Ok(v),
            None => self.calibrated_force_variance(),
        }
    }

    pub fn force_kernels(&self) -> Result<Vec<SeKernel>> {
        self.resolved_force_variance()?
            .iter()
            .map(|&v| SeKernel::new(v, self.force_lengthscale))
            .collect()
    }

    fn fine_steps(&self) -> Result<usize> {
        let steps = self.truth_horizon / self.fine_dt;
        let frame_ratio = self.dt / self.fine_dt;
        if (steps - steps.round()).abs() > 1e-6 || (frame_ratio - frame_ratio.round()).abs() > 1e-6 {
            return Err(Error::InvalidGrid(
                "frame spacing and horizon must be multiples of the fine step".into(),
            ));
        }
        if frame_ratio.round() < 10.0 {
            return Err(Error::InvalidGrid(
                "fine grid must be at least 10x finer than frames".into(),
            ));
        }
        if self.truth_horizon < self.clip_duration() {
            return Err(Error::InvalidGrid("truth horizon shorter than the clip".into()));
        }
        Ok(steps.round() as usize)
    }
}

/// A sequence generator with its expensive pieces factorized once.
#[derive(Debug, Clone)]
pub struct Generator {
    config: DatasetConfig,
    system: LtiSystem,
    sampler: ForceSampler,
    steps: usize,
}

impl Generator {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        let steps = config.fine_steps()?;
        let system = build_experiment_system(&config.oscillator);
        let grid: Vec<f64> = (0..steps).map(|k| k as f64 * config.fine_dt).collect();
        let sampler = ForceSampler::new(&config.force_kernels()?, &grid)?;
        Ok(Self {
            config,
            system,
            sampler,
            steps,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn system(&self) -> &LtiSystem {
        &self.system
    }

    pub fn generate(&self, rng: &mut RngStream) -> Result<(VideoSequence, GroundTruth)> {
        let cfg = &self.config;
        let forces = self.sampler.sample(rng);
        let input = SampledInput::new(0.0, cfg.fine_dt, forces.clone())?;
        let latent = simulate_fine(&self.system, &input, &DVector::zeros(self.system.state_dim()))?;

        let mut held = DMatrix::zeros(forces.nrows(), self.steps + 1);
        held.columns_mut(0, self.steps).copy_from(&forces);
        held.set_column(self.steps, &forces.column(self.steps - 1));
        let truth = GroundTruth {
            latent,
            forces: held,
        };

        let ratio = (cfg.dt / cfg.fine_dt).round() as usize;
        let frames = (0..cfg.n_frames)
            .map(|i| {
                let y = truth.latent.outputs.column((i + 1) * ratio);
                render_frame(y.as_slice(), &cfg.render)
            })
            .collect();
        Ok((VideoSequence::new(cfg.render.d, cfg.dt, frames)?, truth))
    }
}

/// `n_v` sequences; sequence `i` uses child stream `first_stream + i` of `rng`.
pub fn generate_dataset(
    n_v: usize,
    config: &DatasetConfig,
    rng: &RngStream,
    first_stream: u64,
) -> Result<Vec<(VideoSequence, GroundTruth)>> {
    if n_v == 0 {
        return Err(Error::InvalidArgument("need at least one sequence".into()));
    }
    let generator = Generator::new(config.clone())?;
    (0..n_v)
        .into_par_iter()
        .map(|i| generator.generate(&mut rng.child(first_stream + i as u64)))
        .collect()
}

pub fn sequence_file_name(index: usize) -> String {
    format!("seq_{index:04}.pegv")
}

pub fn truth_file_name(index: usize) -> String {
    format!("seq_{index:04}.truth.csv")
}

/// Writes `seq_NNNN.pegv` and the sibling `seq_NNNN.truth.csv` files.
pub fn write_dataset(dir: &Path, items: &[(VideoSequence, GroundTruth)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (i, (seq, truth)) in items.iter().enumerate() {
        let seq_path = dir.join(sequence_file_name(i));
        seq.save(&seq_path)?;
        truth.save(&dir.join(truth_file_name(i)))?;
        written.push(seq_path);
    }
    Ok(written)
}

/// Loads every `*.pegv` file of `dir` in name order. Ground-truth files are not touched.
pub fn load_sequences(dir: &Path) -> Result<Vec<VideoSequence>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pegv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::NotFound(format!("no sequence files in {}", dir.display())));
    }
    paths.iter().map(|p| VideoSequence::load(p)).collect()
}
