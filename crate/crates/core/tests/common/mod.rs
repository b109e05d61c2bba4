//! Helpers shared by the integration tests.
#![allow(dead_code)]

use pegp_vae::datagen::{generate_dataset, DatasetConfig, GroundTruth, VideoSequence};
use pegp_vae::kernels::{LatentPrior, PhysicsKernel, SeKernel};
use pegp_vae::numerics::RngStream;
use pegp_vae::vae::{elbo_gradient, elbo_with_gram, Model};

pub fn physics_prior(cfg: &DatasetConfig) -> LatentPrior {
    let sys = pegp_vae::datagen::build_experiment_system(&cfg.oscillator);
    LatentPrior::Physics(PhysicsKernel::with_defaults(sys, cfg.force_kernels().unwrap()).unwrap())
}

pub fn se_prior() -> LatentPrior {
    LatentPrior::SeBaseline(vec![SeKernel::new(1.0, 3.0).unwrap(); 2])
}

pub fn small_dataset(n: usize, seed: u64) -> Vec<(VideoSequence, GroundTruth)> {
    generate_dataset(n, &DatasetConfig::default(), &RngStream::new(seed), 0).unwrap()
}

/// Parameter-coordinate address.
#[derive(Debug, Clone, Copy)]
pub struct Coord {
    /// 0..4 encoder, 4..8 decoder, 8 hyperparameters.
    pub block: usize,
    pub index: usize,
}

fn block_len(model: &Model, block: usize) -> usize {
    match block {
        0..=3 => model.encoder.slices()[block].len(),
        4..=7 => model.decoder.slices()[block - 4].len(),
        _ => model.prior.hyperparameters().len(),
    }
}

fn perturbed(model: &Model, c: Coord, delta: f64) -> Model {
    let mut m = model.clone();
    match c.block {
        0..=3 => m.encoder.slices_mut()[c.block][c.index] += delta,
        4..=7 => m.decoder.slices_mut()[c.block - 4][c.index] += delta,
        _ => {
            let mut theta = m.prior.hyperparameters();
            theta[c.index] += delta;
            m.prior = m.prior.with_hyperparameters(&theta).unwrap();
        }
    }
    m
}

#[derive(Debug, Clone, Copy)]
pub struct SweepResult {
    pub checked: usize,
    pub worst_relative: f64,
}

/// Finite-difference check of the ELBO gradient at `n` random coordinates,
/// with the Monte-Carlo noise held fixed.
///
/// Each coordinate is differentiated with a fourth-order central stencil at
/// every step in `steps` (largest first); the interior estimate that agrees
/// best with both of its neighbours on the ladder is kept. Relative error is taken
/// against `max(|analytic|, |numeric|, floor)`. `blocks` limits which
/// parameter blocks are sampled.
pub fn gradient_sweep(
    seq: &VideoSequence,
    model: &Model,
    blocks: &[usize],
    n: usize,
    seed: u64,
    steps: &[f64],
    floor: f64,
) -> SweepResult {
    let times = seq.timestamps();
    let gram = model.prior.gram(&times).unwrap();
    let noise_seed = seed ^ 0x5eed;
    let grad = elbo_gradient(seq, model, &gram, 1, true, &mut RngStream::new(noise_seed)).unwrap();
    let analytic = |c: Coord| -> f64 {
        match c.block {
            0..=3 => grad.encoder.slices()[c.block][c.index],
            4..=7 => grad.decoder.slices()[c.block - 4][c.index],
            _ => grad.hyperparameters[c.index],
        }
    };
    let value = |m: &Model| {
        let g = m.prior.gram(&times).unwrap();
        elbo_with_gram(seq, m, &g, 1, &mut RngStream::new(noise_seed)).unwrap().total
    };
    let mut rng = RngStream::new(seed);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        // Visit every block, then sample blocks uniformly.
        let block = if k < blocks.len() { blocks[k] } else { blocks[rng.below(blocks.len())] };
        let c = Coord {
            block,
            index: rng.below(block_len(model, block)),
        };
        let f = |h: f64| value(&perturbed(model, c, h));
        let estimates: Vec<f64> = steps
            .iter()
            .map(|&eps| (8.0 * (f(eps) - f(-eps)) - (f(2.0 * eps) - f(-2.0 * eps))) / (12.0 * eps))
            .collect();
        let fd = if estimates.len() < 3 {
            estimates[0]
        } else {
            // An interior step is scored by its worse disagreement with either
            // neighbour, so a chance agreement between two noisy estimates
            // cannot win on its own.
            let spread = |i: usize| {
                (estimates[i] - estimates[i - 1])
                    .abs()
                    .max((estimates[i] - estimates[i + 1]).abs())
            };
            let best = (1..estimates.len() - 1)
                .min_by(|&a, &b| spread(a).total_cmp(&spread(b)))
                .unwrap();
            estimates[best]
        };
        let an = analytic(c);
        if !an.is_finite() || !fd.is_finite() {
            return SweepResult { checked: k + 1, worst_relative: f64::INFINITY };
        }
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        if rel > worst {
            eprintln!("coord {c:?}: analytic {an:e}, numeric {fd:e}, rel {rel:e}");
        }
        worst = worst.max(rel);
    }
    SweepResult {
        checked: n,
        worst_relative: worst,
    }
}

/// Finite-difference step ladder used by the gradient checks.
pub const FD_STEPS: [f64; 5] = [3e-2, 1e-2, 3e-3, 1e-3, 3e-4];

pub const NETWORK_BLOCKS: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
pub const HYPER_BLOCK: [usize; 1] = [8];
