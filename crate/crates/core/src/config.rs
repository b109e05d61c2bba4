//! Flat `key = value` experiment configuration (TOML syntax, no tables).
//!
//! Every key is optional and falls back to the experiment defaults. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetConfig, OscillatorParams, RenderConfig};
use crate::error::{Error, Result};
use crate::kernels::{KernelKind, LatentPrior, PhysicsKernel, SeKernel};
use crate::vae::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,

    pub n_train: usize,
    pub n_test: usize,
    pub n_frames: usize,
    pub frame_dt: f64,
    pub fine_dt: f64,
    pub truth_horizon: f64,
    pub pixels: usize,
    pub workspace: f64,
    pub blob_radius: f64,

    pub freq1_khz: f64,
    pub freq2_khz: f64,
    pub damping1: f64,
    pub damping2: f64,

    pub force_lengthscale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_variance1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_variance2: Option<f64>,

    pub kernel: KernelKind,
    pub quad_nodes: usize,
    pub quad_tol: f64,
    pub se_variance: f64,
    pub se_lengthscale: f64,

    pub hidden: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub sequences_per_step: usize,
    pub train_hyperparams: bool,
    pub checkpoint_every: usize,

    pub horizon: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            n_train: 100,
            n_test: 10,
            n_frames: data.n_frames,
            frame_dt: data.dt,
            fine_dt: data.fine_dt,
            truth_horizon: data.truth_horizon,
            pixels: data.render.d,
            workspace: data.render.workspace,
            blob_radius: data.render.blob_radius,
            freq1_khz: data.oscillator.freq_khz[0],
            freq2_khz: data.oscillator.freq_khz[1],
            damping1: data.oscillator.damping[0],
            damping2: data.oscillator.damping[1],
            force_lengthscale: data.force_lengthscale,
            force_variance1: None,
            force_variance2: None,
            kernel: KernelKind::Physics,
            quad_nodes: crate::kernels::DEFAULT_QUAD_NODES,
            quad_tol: crate::kernels::DEFAULT_CONVERGENCE_TOL,
            se_variance: 1.0,
            se_lengthscale: 3.0,
            hidden: crate::vae::DEFAULT_HIDDEN,
            iterations: train.iterations,
            learning_rate: train.learning_rate,
            mc_samples: train.mc_samples,
            sequences_per_step: train.sequences_per_step,
            train_hyperparams: train.train_hyperparams,
            checkpoint_every: 1000,
            horizon: 50.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_train == 0 || self.n_test == 0 || self.n_frames == 0 || self.pixels == 0 {
            return bad("n_train, n_test, n_frames and pixels must be at least 1");
        }
        if self.pixels > u16::MAX as usize || self.n_frames > u16::MAX as usize {
            return bad("pixels and n_frames must fit in 16 bits");
        }
        if self.hidden == 0 || self.mc_samples == 0 || self.sequences_per_step == 0 || self.checkpoint_every == 0 {
            return bad("hidden, mc_samples, sequences_per_step and checkpoint_every must be at least 1");
        }
        let positive = [
            self.frame_dt,
            self.fine_dt,
            self.truth_horizon,
            self.workspace,
            self.blob_radius,
            self.freq1_khz,
            self.freq2_khz,
            self.force_lengthscale,
            self.quad_tol,
            self.se_variance,
            self.se_lengthscale,
            self.learning_rate,
            self.horizon,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("time steps, scales, frequencies, tolerances and learning_rate must be positive");
        }
        if self.damping1 < 0.0 || self.damping2 < 0.0 {
            return bad("damping ratios must be non-negative");
        }
        if self.force_variance1.is_some() != self.force_variance2.is_some() {
            return bad("set both force_variance1 and force_variance2 or neither");
        }
        if self.quad_nodes == 0 {
            return bad("quad_nodes must be at least 1");
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            oscillator: OscillatorParams {
                freq_khz: [self.freq1_khz, self.freq2_khz],
                damping: [self.damping1, self.damping2],
            },
            render: RenderConfig {
                d: self.pixels,
                workspace: self.workspace,
                blob_radius: self.blob_radius,
            },
            n_frames: self.n_frames,
            dt: self.frame_dt,
            fine_dt: self.fine_dt,
            truth_horizon: self.truth_horizon,
            force_lengthscale: self.force_lengthscale,
            force_variance: self.force_variance1.zip(self.force_variance2).map(|(a, b)| [a, b]),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            mc_samples: self.mc_samples,
            seed: self.seed,
            sequences_per_step: self.sequences_per_step,
            train_hyperparams: self.train_hyperparams,
        }
    }

    /// Latent prior of the given kind. The physics kernel uses the force
    /// prior that generated the data.
    pub fn prior(&self, kind: KernelKind) -> Result<LatentPrior> {
        match kind {
            KernelKind::Physics => {
                let data = self.dataset();
                let system = crate::datagen::build_experiment_system(&data.oscillator);
                let kernel = PhysicsKernel::new(system, data.force_kernels()?, self.quad_nodes, self.quad_tol)?;
                Ok(LatentPrior::Physics(kernel))
            }
            KernelKind::SeBaseline => {
                let k = SeKernel::new(self.se_variance, self.se_lengthscale)?;
                Ok(LatentPrior::SeBaseline(vec![k; 2]))
            }
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data_dir().join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.data_dir().join("test")
    }

    pub fn run_dir(&self, kind: KernelKind) -> PathBuf {
        self.output_dir.join("runs").join(kind.name())
    }
}
