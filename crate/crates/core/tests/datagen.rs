//! Synthetic dataset generation: physics consistency, calibration and persistence.

mod common;

use nalgebra::{DMatrix, DVector};

use pegp_vae::datagen::{
    generate_dataset, sample_forces, write_dataset, DatasetConfig, Generator, GroundTruth, VideoSequence,
};
use pegp_vae::kernels::{se_eval, SeKernel};
use pegp_vae::numerics::RngStream;

/// RK4 with the force held constant over each fine step.
fn rk4_states(sys: &pegp_vae::lti::LtiSystem, forces: &DMatrix<f64>, h: f64) -> Vec<DVector<f64>> {
    let mut x = DVector::zeros(sys.state_dim());
    let mut out = vec![x.clone()];
    let sub = 10;
    let dh = h / sub as f64;
    for k in 0..forces.ncols() - 1 {
        let u = forces.column(k).into_owned();
        let f = |x: &DVector<f64>| sys.a() * x + sys.b() * &u;
        for _ in 0..sub {
            let k1 = f(&x);
            let k2 = f(&(&x + &k1 * (dh / 2.0)));
            let k3 = f(&(&x + &k2 * (dh / 2.0)));
            let k4 = f(&(&x + &k3 * dh));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dh / 6.0);
        }
        out.push(x.clone());
    }
    out
}

#[test]
fn ground_truth_satisfies_the_ode() {
    let cfg = DatasetConfig::default();
    let generator = Generator::new(cfg.clone()).unwrap();
    for seed in 0..3 {
        let (_, truth) = generator.generate(&mut RngStream::new(seed)).unwrap();
        let oracle = rk4_states(generator.system(), &truth.forces, cfg.fine_dt);
        assert_eq!(oracle.len(), truth.latent.len());
        let scale = truth.latent.states.amax();
        for (k, x) in oracle.iter().enumerate() {
            let diff = (truth.latent.state_at(k) - x).amax();
            assert!(diff <= 1e-9 * scale, "seed {seed} step {k}: {diff}");
        }
    }
}

#[test]
fn frames_sample_the_trajectory_at_frame_times() {
    let cfg = DatasetConfig::default();
    let (seq, truth) = Generator::new(cfg.clone()).unwrap().generate(&mut RngStream::new(4)).unwrap();
    assert_eq!(seq.n_frames, 30);
    let times = seq.timestamps();
    assert_eq!(times.first(), Some(&1.0));
    assert_eq!(times.last(), Some(&30.0));
    for (i, &t) in times.iter().enumerate() {
        let y = truth.position_at(t).unwrap();
        assert_eq!(seq.frame(i), pegp_vae::datagen::render_frame(y.as_slice(), &cfg.render).as_slice());
    }
}

#[test]
fn particle_stays_in_view() {
    let data = common::small_dataset(100, 2024);
    let (mut lit, mut total) = (0usize, 0usize);
    for (seq, _) in &data {
        for i in 0..seq.n_frames {
            total += 1;
            lit += usize::from(seq.frame(i).iter().any(|&p| p == 1));
            assert!(seq.frame(i).iter().all(|&p| p <= 1));
        }
    }
    assert!(lit as f64 >= 0.95 * total as f64, "{lit} of {total} frames non-empty");
}

#[test]
fn calibrated_variance_gives_target_position_spread() {
    let cfg = DatasetConfig::default();
    let data = generate_dataset(1000, &cfg, &RngStream::new(55), 0).unwrap();
    let t = cfg.clip_duration();
    for axis in 0..2 {
        let values: Vec<f64> = data.iter().map(|(_, g)| g.position_at(t).unwrap()[axis]).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        let target = cfg.render.workspace / 3.0;
        assert!((var.sqrt() / target - 1.0).abs() < 0.1, "axis {axis}: std {}", var.sqrt());
    }
}

#[test]
fn force_draws_have_kernel_covariance() {
    let kernel = SeKernel::new(0.8, 5.0).unwrap();
    let grid: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
    let (a, b) = (20, 45);
    let mut rng = RngStream::new(17);
    let n = 500;
    let draws: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let f = sample_forces(&mut rng, &[kernel], &grid).unwrap();
            (f[(0, a)], f[(0, b)])
        })
        .collect();
    let cov = |pick: &dyn Fn(&(f64, f64)) -> (f64, f64)| draws.iter().map(|d| pick(d).0 * pick(d).1).sum::<f64>() / n as f64;
    let c_aa = cov(&|d| (d.0, d.0));
    let c_ab = cov(&|d| (d.0, d.1));
    assert!((c_aa / se_eval(&kernel, grid[a], grid[a]) - 1.0).abs() < 0.1, "{c_aa}");
    assert!((c_ab / se_eval(&kernel, grid[a], grid[b]) - 1.0).abs() < 0.1, "{c_ab}");
}

#[test]
fn parallel_generation_matches_serial_and_is_reproducible() {
    let cfg = DatasetConfig::default();
    let master = RngStream::new(9);
    let parallel = generate_dataset(6, &cfg, &master, 100).unwrap();
    let again = generate_dataset(6, &cfg, &master, 100).unwrap();
    assert_eq!(parallel, again);
    let generator = Generator::new(cfg).unwrap();
    for (i, item) in parallel.iter().enumerate() {
        assert_eq!(&generator.generate(&mut master.child(100 + i as u64)).unwrap(), item);
    }
}

#[test]
fn dataset_files_are_byte_identical_across_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        write_dataset(dir.path(), &common::small_dataset(2, 8)).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for name in names {
        let a = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    let seq = VideoSequence::load(&dirs[0].path().join("seq_0000.pegv")).unwrap();
    let truth = GroundTruth::load(&dirs[0].path().join("seq_0000.truth.csv")).unwrap();
    let (orig_seq, orig_truth) = &common::small_dataset(2, 8)[0];
    assert_eq!(&seq, orig_seq);
    assert!((truth.latent.outputs.clone() - &orig_truth.latent.outputs).amax() < 1e-12);
}
