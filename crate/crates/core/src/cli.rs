//! `pegp` command line: dataset generation, training, reconstruction,
//! extrapolation comparison and kernel heatmaps.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::datagen::{
    generate_dataset, load_sequences, sequence_file_name, truth_file_name, write_dataset, write_pgm,
    GroundTruth, VideoSequence,
};
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, KernelKind};
use crate::numerics::RngStream;
use crate::vae::{
    extrapolate, reconstruct, rmse, Alignment, AlignmentKind, Checkpoint, ElboTrace, Model, Trainer,
};

/// Child-stream offset of the held-out sequences, far from the training streams.
const TEST_STREAM_OFFSET: u64 = 1 << 32;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const FINAL_CHECKPOINT: &str = "final.pegp";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Parser)]
#[command(name = "pegp", version, about = "Physics-enhanced GP VAE experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config file (flat key = value); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and held-out video datasets with ground truth.
    Generate(Common),
    /// Train the configured model on the training set.
    Train {
        #[command(flatten)]
        common: Common,
        /// Total iteration count (overrides the config).
        #[arg(long, value_name = "N")]
        iterations: Option<usize>,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct one held-out sequence.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Held-out sequence index.
        #[arg(long, value_name = "ID")]
        sequence: usize,
    },
    /// Compare two trained kernels on extrapolation past the observed frames.
    Extrapolate {
        #[command(flatten)]
        common: Common,
        /// One checkpoint per kernel; pass the flag twice.
        #[arg(long, value_name = "PATH", required = true, num_args = 1)]
        checkpoint: Vec<PathBuf>,
        /// Prediction horizon in µs (overrides the config).
        #[arg(long, value_name = "MICROSECONDS")]
        horizon: Option<f64>,
    },
    /// Write normalized first-output Gram blocks of both kernels.
    KernelHeatmap(Common),
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// Provenance of a generated dataset; contains no timestamps or absolute paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_frames: usize,
    pub frame_dt: f64,
    pub pixels: usize,
    pub force_lengthscale: f64,
    pub force_variance: [f64; 2],
    pub files: Vec<ManifestEntry>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Removes sequence and ground-truth files left by an earlier run.
fn clear_sequences(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("seq_") && (name.ends_with(".pegv") || name.ends_with(".truth.csv")) {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut data = cfg.dataset();
    let variance = data.resolved_force_variance()?;
    data.force_variance = Some(variance);
    let rng = RngStream::new(cfg.seed);
    let train = generate_dataset(cfg.n_train, &data, &rng, 0)?;
    let test = generate_dataset(cfg.n_test, &data, &rng, TEST_STREAM_OFFSET)?;

    let mut files = Vec::new();
    for (split, dir, items) in [("train", cfg.train_dir(), &train), ("test", cfg.test_dir(), &test)] {
        clear_sequences(&dir)?;
        write_dataset(&dir, items)?;
        for i in 0..items.len() {
            for name in [sequence_file_name(i), truth_file_name(i)] {
                files.push(ManifestEntry {
                    sha256: sha256_hex(&dir.join(&name))?,
                    file: format!("{split}/{name}"),
                });
            }
        }
    }
    let manifest = Manifest {
        seed: cfg.seed,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        n_frames: cfg.n_frames,
        frame_dt: cfg.frame_dt,
        pixels: cfg.pixels,
        force_lengthscale: cfg.force_lengthscale,
        force_variance: variance,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&cfg.data_dir().join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub kind: KernelKind,
    pub iterations: usize,
    pub final_elbo: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub trace_path: PathBuf,
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt_{step:06}.pegp")
}

/// Trains `cfg.kernel` for `cfg.iterations` total steps, optionally resuming.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_sequences(&cfg.train_dir())?;
    let pixels = data[0].d * data[0].d;
    let run_dir = cfg.run_dir(cfg.kernel);
    create_dir(&run_dir)?;
    let trace_path = run_dir.join(TRACE_FILE);
    let mut train_cfg = cfg.train();

    let (mut trainer, mut trace) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.kind != cfg.kernel {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint holds a {} model but the config selects {}",
                    ckpt.kind.name(),
                    cfg.kernel.name()
                )));
            }
            train_cfg.seed = ckpt.seed;
            train_cfg.train_hyperparams = ckpt.train_hyperparams;
            let model = ckpt.model(&cfg.prior(ckpt.kind)?)?;
            let trainer = Trainer::resume(model, ckpt.adam.clone(), train_cfg)?;
            let mut trace = match std::fs::read_to_string(&trace_path) {
                Ok(text) => ElboTrace::from_csv(&text)?,
                Err(e) => return Err(Error::io(&trace_path, e)),
            };
            let step = ckpt.step() as usize;
            if trace.rows.len() < step {
                return Err(Error::format(
                    "loss trace",
                    format!("{} rows but the checkpoint is at step {step}", trace.rows.len()),
                ));
            }
            trace.rows.truncate(step);
            (trainer, trace)
        }
        None => {
            let model = Model::seeded(cfg.prior(cfg.kernel)?, pixels, cfg.hidden, cfg.seed);
            (Trainer::new(model, train_cfg)?, ElboTrace::default())
        }
    };

    let mut checkpoints = Vec::new();
    let every = cfg.checkpoint_every;
    trainer.run_until(&data, cfg.iterations, |step, e, t| {
        trace.rows.push(*e);
        if step % every == 0 {
            let path = run_dir.join(checkpoint_file_name(step));
            save_checkpoint(t, &path)?;
            write_text(&trace_path, &trace.to_csv())?;
            checkpoints.push(path);
        }
        Ok(())
    })?;
    let final_path = run_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&trainer, &final_path)?;
    write_text(&trace_path, &trace.to_csv())?;
    checkpoints.push(final_path);
    Ok(TrainReport {
        kind: cfg.kernel,
        iterations: trainer.step_count(),
        final_elbo: trace.rows.last().map(|e| e.total),
        checkpoints,
        trace_path,
    })
}

fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    Checkpoint::from_trainer(&t.model, &t.adam, t.config.seed, t.config.train_hyperparams).save(path)
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.model(&cfg.prior(ckpt.kind)?)
}

fn load_test_sequence(cfg: &ExperimentConfig, id: usize) -> Result<(VideoSequence, Option<GroundTruth>)> {
    let dir = cfg.test_dir();
    let path = dir.join(sequence_file_name(id));
    if !path.exists() {
        return Err(Error::NotFound(format!("held-out sequence {id} ({})", path.display())));
    }
    let seq = VideoSequence::load(&path)?;
    let truth_path = dir.join(truth_file_name(id));
    let truth = if truth_path.exists() {
        Some(GroundTruth::load(&truth_path)?)
    } else {
        None
    };
    Ok((seq, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructReport {
    pub dir: PathBuf,
    /// Affine-aligned latent RMSE, when ground truth is available.
    pub aligned_rmse: Option<f64>,
}

pub fn cmd_reconstruct(cfg: &ExperimentConfig, checkpoint: &Path, id: usize) -> Result<ReconstructReport> {
    let model = load_model(cfg, checkpoint)?;
    let (seq, truth) = load_test_sequence(cfg, id)?;
    let rec = reconstruct(&seq, &model)?;
    let dir = cfg
        .output_dir
        .join("reconstruct")
        .join(model.prior.kind().name())
        .join(format!("seq_{id:04}"));
    create_dir(&dir)?;
    rec.posterior.write_csv(&dir.join("posterior.csv"))?;
    let original = seq.frames_matrix();
    for i in 0..seq.n_frames {
        let orig: Vec<f64> = original.row(i).iter().copied().collect();
        let recon: Vec<f64> = rec.frames.row(i).iter().copied().collect();
        write_pgm(&dir.join(format!("original_{i:02}.pgm")), seq.d, &orig)?;
        write_pgm(&dir.join(format!("reconstructed_{i:02}.pgm")), seq.d, &recon)?;
    }
    let aligned_rmse = match truth {
        Some(t) => {
            let truth = t.positions(&rec.posterior.query_times)?;
            Some(crate::vae::aligned_rmse(
                &rec.posterior.mean_frames(),
                &truth,
                AlignmentKind::Affine,
            )?)
        }
        None => None,
    };
    Ok(ReconstructReport { dir, aligned_rmse })
}

/// Per-sequence, per-kernel metrics of one extrapolation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub sequence: usize,
    pub kind: KernelKind,
    pub rmse_observed: f64,
    /// `None` when the horizon equals the observation window.
    pub rmse_extrapolated: Option<f64>,
    pub mean_std_extrapolated: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub physics_wins: usize,
    pub se_wins: usize,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let mut out = String::from(
            "sequence,kernel,rmse_observed,rmse_extrapolated,mean_std_extrapolated,physics_wins,se_baseline_wins\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.9e},{},{},,",
                r.sequence,
                r.kind.name(),
                r.rmse_observed,
                opt(r.rmse_extrapolated),
                opt(r.mean_std_extrapolated)
            );
        }
        let _ = writeln!(out, "summary,,,,,{},{}", self.physics_wins, self.se_wins);
        out
    }
}

/// Metrics of one trained model on one sequence: the alignment is fitted on
/// the observed frames and applied unchanged to the extrapolated ones.
fn score(seq: &VideoSequence, truth: &GroundTruth, model: &Model, horizon: f64) -> Result<(f64, Option<f64>, Option<f64>)> {
    let post = extrapolate(seq, model, horizon)?;
    let n_obs = seq.n_frames;
    let mean = post.mean_frames();
    let target = truth.positions(&post.query_times)?;
    let obs_mean = mean.rows(0, n_obs).into_owned();
    let obs_truth = target.rows(0, n_obs).into_owned();
    let align = Alignment::fit(&obs_mean, &obs_truth, AlignmentKind::Affine)?;
    let aligned = align.apply(&mean);
    let rmse_obs = rmse(&aligned.rows(0, n_obs).into_owned(), &obs_truth);
    let n_ext = post.n_times() - n_obs;
    if n_ext == 0 {
        return Ok((rmse_obs, None, None));
    }
    let rmse_ext = rmse(
        &aligned.rows(n_obs, n_ext).into_owned(),
        &target.rows(n_obs, n_ext).into_owned(),
    );
    let p = post.block_dim;
    let std_sum: f64 = (0..p)
        .flat_map(|d| (n_obs..post.n_times()).map(move |r| (d, r)))
        .map(|(d, r)| post.std_at(d, r))
        .sum();
    Ok((rmse_obs, Some(rmse_ext), Some(std_sum / (p * n_ext) as f64)))
}

/// Scores both kernels on every held-out sequence and counts per-sequence wins.
pub fn cmd_extrapolate(cfg: &ExperimentConfig, checkpoints: &[PathBuf], horizon: f64) -> Result<Comparison> {
    if checkpoints.len() != 2 {
        return Err(Error::Usage(format!(
            "extrapolate needs one checkpoint per kernel, got {}",
            checkpoints.len()
        )));
    }
    let models = checkpoints
        .iter()
        .map(|p| load_model(cfg, p))
        .collect::<Result<Vec<_>>>()?;
    let (physics, se) = match (models[0].prior.kind(), models[1].prior.kind()) {
        (KernelKind::Physics, KernelKind::SeBaseline) => (&models[0], &models[1]),
        (KernelKind::SeBaseline, KernelKind::Physics) => (&models[1], &models[0]),
        _ => {
            return Err(Error::InvalidArgument(
                "extrapolate needs one physics and one se-baseline checkpoint".into(),
            ))
        }
    };
    let observed = cfg.n_frames as f64 * cfg.frame_dt;
    if horizon < observed - 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} µs lies inside the observed window of {observed} µs"
        )));
    }
    if horizon > cfg.truth_horizon + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} µs exceeds the ground-truth horizon {} µs",
            cfg.truth_horizon
        )));
    }

    let mut rows = Vec::new();
    let (mut physics_wins, mut se_wins) = (0, 0);
    for id in 0..cfg.n_test {
        let (seq, truth) = load_test_sequence(cfg, id)?;
        let truth = truth.ok_or_else(|| {
            Error::NotFound(format!("ground truth of held-out sequence {id}"))
        })?;
        let mut scored = Vec::new();
        for model in [physics, se] {
            let (obs, ext, std) = score(&seq, &truth, model, horizon)?;
            scored.push(ext.unwrap_or(obs));
            rows.push(ComparisonRow {
                sequence: id,
                kind: model.prior.kind(),
                rmse_observed: obs,
                rmse_extrapolated: ext,
                mean_std_extrapolated: std,
            });
        }
        if scored[0] < scored[1] {
            physics_wins += 1;
        } else {
            se_wins += 1;
        }
    }
    let comparison = Comparison {
        rows,
        physics_wins,
        se_wins,
    };
    let dir = cfg.output_dir.join("extrapolate");
    create_dir(&dir)?;
    write_text(&dir.join(COMPARISON_FILE), &comparison.to_csv())?;
    Ok(comparison)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub physics: PathBuf,
    pub se_baseline: PathBuf,
}

/// Unit-diagonal first-output blocks of both priors over the frame times.
pub fn cmd_kernel_heatmap(cfg: &ExperimentConfig) -> Result<Heatmaps> {
    cfg.validate()?;
    let times: Vec<f64> = (1..=cfg.n_frames).map(|i| i as f64 * cfg.frame_dt).collect();
    let dir = cfg.output_dir.join("heatmap");
    create_dir(&dir)?;
    let mut paths = Vec::new();
    for kind in [KernelKind::Physics, KernelKind::SeBaseline] {
        let gram: GramMatrix = cfg.prior(kind)?.gram(&times)?;
        let path = dir.join(format!("k11_{}.csv", kind.name()));
        gram.write_block_csv(&path, 0, 0, true)?;
        paths.push(path);
    }
    Ok(Heatmaps {
        physics: paths[0].clone(),
        se_baseline: paths[1].clone(),
    })
}

fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = resolve_config(&common)?;
            let m = cmd_generate(&cfg)?;
            Ok(format!(
                "generated {} training and {} held-out sequences in {} (force variance {:.6e}, {:.6e})",
                m.n_train,
                m.n_test,
                cfg.data_dir().display(),
                m.force_variance[0],
                m.force_variance[1]
            ))
        }
        Command::Train {
            common,
            iterations,
            checkpoint,
        } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let r = cmd_train(&cfg, checkpoint.as_deref())?;
            Ok(format!(
                "trained {} kernel for {} iterations, final ELBO {}; trace {}",
                r.kind.name(),
                r.iterations,
                r.final_elbo.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
                r.trace_path.display()
            ))
        }
        Command::Reconstruct {
            common,
            checkpoint,
            sequence,
        } => {
            let cfg = resolve_config(&common)?;
            let r = cmd_reconstruct(&cfg, &checkpoint, sequence)?;
            let metric = r
                .aligned_rmse
                .map(|v| format!("aligned latent RMSE {v:.4}"))
                .unwrap_or_else(|| "no ground truth available".into());
            Ok(format!("reconstruction written to {}; {metric}", r.dir.display()))
        }
        Command::Extrapolate {
            common,
            checkpoint,
            horizon,
        } => {
            let cfg = resolve_config(&common)?;
            let c = cmd_extrapolate(&cfg, &checkpoint, horizon.unwrap_or(cfg.horizon))?;
            Ok(format!(
                "physics kernel better on {} of {} held-out sequences; see {}",
                c.physics_wins,
                c.physics_wins + c.se_wins,
                cfg.output_dir.join("extrapolate").join(COMPARISON_FILE).display()
            ))
        }
        Command::KernelHeatmap(common) => {
            let cfg = resolve_config(&common)?;
            let h = cmd_kernel_heatmap(&cfg)?;
            Ok(format!(
                "wrote {} and {}",
                h.physics.display(),
                h.se_baseline.display()
            ))
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
