//! Command-line workflows end to end on small configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pegp_vae::cli::{cmd_extrapolate, cmd_generate, cmd_kernel_heatmap, cmd_reconstruct, cmd_train, Manifest};
use pegp_vae::config::ExperimentConfig;
use pegp_vae::datagen::VideoSequence;
use pegp_vae::kernels::KernelKind;
use pegp_vae::vae::{aligned_rmse, reconstruct, AlignmentKind, Checkpoint, ElboTrace};

fn pegp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pegp")).args(args).output().unwrap()
}

fn small_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: out.to_path_buf(),
        n_train: 4,
        n_test: 10,
        hidden: 8,
        iterations: 10,
        checkpoint_every: 5,
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("experiment.toml");
    cfg.save(&path).unwrap();
    path
}

fn count_files(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn default_generate_writes_the_full_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nested/missing/out");
    let out_str = out.to_str().unwrap();
    let first = pegp(&["generate", "--out", out_str]);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let data = out.join("data");
    assert_eq!(count_files(&data.join("train"), ".pegv"), 100);
    assert_eq!(count_files(&data.join("train"), ".truth.csv"), 100);
    assert_eq!(count_files(&data.join("test"), ".pegv"), 10);
    let manifest_bytes = fs::read(data.join("manifest.json")).unwrap();
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).unwrap();
    assert_eq!((manifest.seed, manifest.n_train, manifest.n_test), (1, 100, 10));
    assert_eq!(manifest.files.len(), 220);

    assert_eq!(pegp(&["generate", "--out", out_str]).status.code(), Some(0));
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), manifest_bytes);
    // Only the output directory was written to.
    let top: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, vec![std::ffi::OsString::from("nested")]);
}

#[test]
fn seed_changes_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    let a = cmd_generate(&cfg).unwrap();
    cfg.seed = 2;
    let b = cmd_generate(&cfg).unwrap();
    assert_ne!(a.files, b.files);
    assert_eq!(a.force_variance, b.force_variance);
}

#[test]
fn train_smoke_run_writes_trace_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&tmp.path().join("out"));
    let cfg_path = write_config(tmp.path(), &cfg);
    cmd_generate(&cfg).unwrap();
    let run = pegp(&["train", "--config", cfg_path.to_str().unwrap(), "--iterations", "10"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let dir = cfg.run_dir(KernelKind::Physics);
    let trace = ElboTrace::from_csv(&fs::read_to_string(dir.join("loss_trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.rows.len(), 10);
    for name in ["ckpt_000005.pegp", "ckpt_000010.pegp", "final.pegp"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    assert_eq!(Checkpoint::load(&dir.join("final.pegp")).unwrap().step(), 10);
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = small_config(&tmp.path().join("full"));
    cmd_generate(&full).unwrap();
    cmd_train(&full, None).unwrap();

    let split = ExperimentConfig {
        iterations: 5,
        ..small_config(&tmp.path().join("split"))
    };
    cmd_generate(&split).unwrap();
    cmd_train(&split, None).unwrap();
    let ckpt = split.run_dir(KernelKind::Physics).join("ckpt_000005.pegp");
    let resumed = ExperimentConfig { iterations: 10, ..split.clone() };
    cmd_train(&resumed, Some(&ckpt)).unwrap();

    let read = |cfg: &ExperimentConfig, name: &str| fs::read(cfg.run_dir(KernelKind::Physics).join(name)).unwrap();
    assert_eq!(read(&full, "loss_trace.csv"), read(&resumed, "loss_trace.csv"));
    assert_eq!(read(&full, "final.pegp"), read(&resumed, "final.pegp"));
}

#[test]
fn training_never_reads_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let with = small_config(&tmp.path().join("with"));
    let without = small_config(&tmp.path().join("without"));
    for cfg in [&with, &without] {
        cmd_generate(cfg).unwrap();
    }
    for entry in fs::read_dir(without.train_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.to_string_lossy().ends_with(".truth.csv") {
            fs::remove_file(path).unwrap();
        }
    }
    assert_eq!(count_files(&without.train_dir(), ".truth.csv"), 0);
    cmd_train(&with, None).unwrap();
    cmd_train(&without, None).unwrap();
    let trace = |cfg: &ExperimentConfig| fs::read(cfg.run_dir(KernelKind::Physics).join("loss_trace.csv")).unwrap();
    assert_eq!(trace(&with), trace(&without));
}

#[test]
fn reconstruct_exports_posterior_and_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&tmp.path().join("out"));
    let cfg_path = write_config(tmp.path(), &cfg);
    cmd_generate(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, None).unwrap().checkpoints.last().unwrap().clone();
    let report = cmd_reconstruct(&cfg, &ckpt, 3).unwrap();

    let csv = fs::read_to_string(report.dir.join("posterior.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "time,dim,mean,std");
    assert_eq!(lines.len() - 1, 30 * 2);
    for i in 0..30 {
        for kind in ["original", "reconstructed"] {
            let pgm = fs::read(report.dir.join(format!("{kind}_{i:02}.pgm"))).unwrap();
            assert!(pgm.starts_with(b"P5\n40 40\n255\n"));
            assert_eq!(pgm.len(), "P5\n40 40\n255\n".len() + 1600);
        }
    }

    // The printed metric agrees with the library computation.
    let prior = cfg.prior(KernelKind::Physics).unwrap();
    let model = Checkpoint::load(&ckpt).unwrap().model(&prior).unwrap();
    let seq = VideoSequence::load(&cfg.test_dir().join("seq_0003.pegv")).unwrap();
    let truth = pegp_vae::datagen::GroundTruth::load(&cfg.test_dir().join("seq_0003.truth.csv")).unwrap();
    let rec = reconstruct(&seq, &model).unwrap();
    let expected = aligned_rmse(&rec.posterior.mean_frames(), &truth.positions(&seq.timestamps()).unwrap(), AlignmentKind::Affine).unwrap();
    assert_eq!(report.aligned_rmse, Some(expected));
    let run = pegp(&[
        "reconstruct",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sequence",
        "3",
    ]);
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&run.stdout).contains(&format!("{expected:.4}")));

    let missing = pegp(&[
        "reconstruct",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sequence",
        "99",
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn extrapolate_compares_both_kernels() {
    let tmp = tempfile::tempdir().unwrap();
    let physics = small_config(&tmp.path().join("out"));
    cmd_generate(&physics).unwrap();
    let se = ExperimentConfig { kernel: KernelKind::SeBaseline, ..physics.clone() };
    let ckpts = vec![
        cmd_train(&physics, None).unwrap().checkpoints.last().unwrap().clone(),
        cmd_train(&se, None).unwrap().checkpoints.last().unwrap().clone(),
    ];

    let c = cmd_extrapolate(&physics, &ckpts, 50.0).unwrap();
    assert_eq!(c.physics_wins + c.se_wins, 10);
    let csv = fs::read_to_string(physics.output_dir.join("extrapolate/comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 20 + 1);
    assert!(lines[21].starts_with("summary,"));
    for line in &lines[1..21] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 7);
        assert!(fields[2..5].iter().all(|f| f.parse::<f64>().is_ok()), "{line}");
    }

    let degenerate = cmd_extrapolate(&physics, &ckpts, 30.0).unwrap();
    assert!(degenerate.rows.iter().all(|r| r.rmse_extrapolated.is_none() && r.mean_std_extrapolated.is_none()));
    let csv = fs::read_to_string(physics.output_dir.join("extrapolate/comparison.csv")).unwrap();
    for line in csv.lines().skip(1).take(20) {
        let fields: Vec<&str> = line.split(',').collect();
        assert!(!fields[2].is_empty() && fields[3].is_empty() && fields[4].is_empty(), "{line}");
    }

    let cfg_path = write_config(tmp.path(), &physics);
    let short = pegp(&[
        "extrapolate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        ckpts[0].to_str().unwrap(),
        "--checkpoint",
        ckpts[1].to_str().unwrap(),
        "--horizon",
        "20",
    ]);
    assert_eq!(short.status.code(), Some(1));
}

fn read_matrix(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn kernel_heatmaps_have_the_expected_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let run = pegp(&["kernel-heatmap", "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0));
    let h = cmd_kernel_heatmap(&small_config(&out)).unwrap();
    for path in [&h.physics, &h.se_baseline] {
        let (header, rows) = read_matrix(path);
        assert_eq!(header.split(',').count(), 30);
        assert_eq!(rows.len(), 30);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), 30);
            assert!((row[i] - 1.0).abs() < 1e-12);
        }
    }
    let (_, se) = read_matrix(&h.se_baseline);
    for i in 1..30 {
        for j in 1..30 {
            assert!((se[i][j] - se[i - 1][j - 1]).abs() < 1e-10);
        }
    }
    let (_, phys) = read_matrix(&h.physics);
    let row = &phys[0];
    assert!(row.windows(2).any(|w| w[0] * w[1] < 0.0), "no oscillation in {row:?}");
}

#[test]
fn shipped_configs_round_trip() {
    let dir = repo_root().join("configs");
    let physics = ExperimentConfig::load(&dir.join("physics.toml")).unwrap();
    let se = ExperimentConfig::load(&dir.join("se-baseline.toml")).unwrap();
    for cfg in [&physics, &se] {
        assert_eq!(&ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
    assert_eq!(physics, ExperimentConfig::default());
    assert_eq!(ExperimentConfig { kernel: KernelKind::Physics, ..se }, physics);
}
