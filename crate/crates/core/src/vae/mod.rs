//! The GP-prior VAE: ELBO evaluation, training, reconstruction and extrapolation.

mod checkpoint;
mod predict;
mod train;

use nalgebra::DMatrix;

use crate::datagen::VideoSequence;
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, LatentPrior};
use crate::nets::{MlpNodes, MlpParams, Tape};
use crate::numerics::RngStream;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use predict::{
    aligned_rmse, extrapolate, reconstruct, rmse, Alignment, AlignmentKind, Reconstruction,
};
pub use train::{train, ElboTrace, TrainConfig, Trainer, TRACE_HEADER};

pub const DEFAULT_HIDDEN: usize = 500;

/// RNG stream for network initialization; training noise uses disjoint streams.
const INIT_STREAM: u64 = 0;

/// The three ELBO terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    /// Mean over samples of the summed Bernoulli log-likelihoods.
    pub reconstruction: f64,
    /// Mean over samples of `-Σ log N(y | μ*, diag σ*²)`.
    pub entropy_term: f64,
    pub log_marginal: f64,
    pub total: f64,
}

impl ElboBreakdown {
    fn new(reconstruction: f64, entropy_term: f64, log_marginal: f64) -> Self {
        Self {
            reconstruction,
            entropy_term,
            log_marginal,
            total: reconstruction + entropy_term + log_marginal,
        }
    }
}

/// Encoder, decoder and latent prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub prior: LatentPrior,
}

impl Model {
    /// Glorot-initialized networks for `pixels`-sized frames.
    pub fn init(prior: LatentPrior, pixels: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let p = prior.latent_dim();
        let encoder = MlpParams::glorot((pixels, hidden, 2 * p), rng);
        let decoder = MlpParams::glorot((p, hidden, pixels), rng);
        Self {
            encoder,
            decoder,
            prior,
        }
    }

    /// [`Model::init`] drawing from the initialization stream of `seed`.
    pub fn seeded(prior: LatentPrior, pixels: usize, hidden: usize, seed: u64) -> Self {
        Self::init(prior, pixels, hidden, &mut RngStream::new(seed).child(INIT_STREAM))
    }

    pub fn zeros(prior: LatentPrior, pixels: usize, hidden: usize) -> Self {
        let p = prior.latent_dim();
        Self {
            encoder: MlpParams::zeros((pixels, hidden, 2 * p)),
            decoder: MlpParams::zeros((p, hidden, pixels)),
            prior,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let p = self.latent_dim();
        let (e_in, _, e_out) = self.encoder.sizes();
        let (d_in, _, d_out) = self.decoder.sizes();
        if e_out != 2 * p || d_in != p || e_in != d_out {
            return Err(Error::dims(
                "model layout",
                format!("encoder {e_in}->{} and decoder {p}->{e_in}", 2 * p),
                format!("encoder {e_in}->{e_out}, decoder {d_in}->{d_out}"),
            ));
        }
        Ok(())
    }
}

/// Gradients of the ELBO total (not of the loss) for every trainable block.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub elbo: ElboBreakdown,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    /// Empty unless hyperparameter gradients were requested.
    pub hyperparameters: Vec<f64>,
}

/// Step in log-hyperparameter space for Gram-level central differences.
const HYPER_FD_STEP: f64 = 1e-5;

fn check_sequence(seq: &VideoSequence, model: &Model) -> Result<()> {
    model.validate()?;
    let (pixels, _, _) = model.encoder.sizes();
    if seq.d * seq.d != pixels {
        return Err(Error::dims("frame size", pixels, seq.d * seq.d));
    }
    if seq.n_frames == 0 {
        return Err(Error::InvalidArgument("sequence has no frames".into()));
    }
    Ok(())
}

fn check_gram(gram: &GramMatrix, seq: &VideoSequence) -> Result<()> {
    let times = seq.timestamps();
    if gram.times.len() != times.len()
        || gram.times.iter().zip(&times).any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::Alignment("Gram grid differs from the sequence timestamps".into()));
    }
    Ok(())
}

struct Graph {
    tape: Tape,
    enc: MlpNodes,
    dec: MlpNodes,
    k: crate::nets::NodeId,
    total: crate::nets::NodeId,
    elbo: ElboBreakdown,
}

fn build_graph(
    seq: &VideoSequence,
    model: &Model,
    gram: &GramMatrix,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<Graph> {
    check_sequence(seq, model)?;
    check_gram(gram, seq)?;
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let n = seq.n_frames;
    let p = model.latent_dim();
    let frames = seq.frames_matrix();

    let mut tape = Tape::new();
    let enc = model.encoder.record(&mut tape);
    let dec = model.decoder.record(&mut tape);
    let k = tape.leaf(gram.matrix.clone());

    let x = tape.constant(frames.clone());
    let heads = enc.forward(&mut tape, x)?;
    let mu = tape.columns(heads, 0, p)?;
    let log_sigma = tape.columns(heads, p, p)?;
    let mu = tape.stack_dim_major(mu)?;
    let log_sigma = tape.stack_dim_major(log_sigma)?;

    let eps = DMatrix::from_column_slice(n * p, mc_samples, &rng.gaussian_draws(n * p * mc_samples));
    let y = tape.gp_sample(mu, log_sigma, k, eps)?;
    let z = tape.unstack_frames(y, n)?;
    let logits = dec.forward(&mut tape, z)?;
    let probs = tape.sigmoid(logits)?;
    let target = DMatrix::from_fn(mc_samples * n, frames.ncols(), |r, c| frames[(r % n, c)]);
    let rec = tape.bernoulli_loglik(probs, target)?;
    let rec = tape.scale(rec, 1.0 / mc_samples as f64)?;
    let ent = tape.gaussian_neg_log_density(y, mu, log_sigma)?;
    let lm = tape.gp_log_marginal(mu, log_sigma, k)?;
    let partial = tape.add(rec, ent)?;
    let total = tape.add(partial, lm)?;

    let elbo = ElboBreakdown::new(tape.scalar(rec)?, tape.scalar(ent)?, tape.scalar(lm)?);
    Ok(Graph {
        tape,
        enc,
        dec,
        k,
        total,
        elbo,
    })
}

/// Monte-Carlo ELBO of one sequence, using `gram` over its timestamps.
pub fn elbo_with_gram(
    seq: &VideoSequence,
    model: &Model,
    gram: &GramMatrix,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<ElboBreakdown> {
    Ok(build_graph(seq, model, gram, mc_samples, rng)?.elbo)
}

pub fn elbo(
    seq: &VideoSequence,
    model: &Model,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<ElboBreakdown> {
    let gram = model.prior.gram(&seq.timestamps())?;
    elbo_with_gram(seq, model, &gram, mc_samples, rng)
}

fn unpack(tape_grads: &crate::nets::Gradients, nodes: &MlpNodes, like: &MlpParams) -> Result<MlpParams> {
    let w1 = tape_grads.wrt(nodes.w1)?;
    let b1 = tape_grads.wrt(nodes.b1)?;
    let w2 = tape_grads.wrt(nodes.w2)?;
    let b2 = tape_grads.wrt(nodes.b2)?;
    let (_, hidden, output) = like.sizes();
    Ok(MlpParams {
        w1,
        b1: nalgebra::DVector::from_column_slice(&b1.as_slice()[..hidden]),
        w2,
        b2: nalgebra::DVector::from_column_slice(&b2.as_slice()[..output]),
    })
}

/// ELBO and its exact gradient with respect to both networks; with
/// `hyperparameters` set, also with respect to the prior's log-hyperparameters
/// (chained through Gram-level central differences).
pub fn elbo_gradient(
    seq: &VideoSequence,
    model: &Model,
    gram: &GramMatrix,
    mc_samples: usize,
    hyperparameters: bool,
    rng: &mut RngStream,
) -> Result<ElboGradient> {
    let graph = build_graph(seq, model, gram, mc_samples, rng)?;
    if !graph.elbo.total.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            what: "non-finite ELBO".into(),
        });
    }
    let grads = graph.tape.backward(graph.total)?;
    let encoder = unpack(&grads, &graph.enc, &model.encoder)?;
    let decoder = unpack(&grads, &graph.dec, &model.decoder)?;
    let hyper = if hyperparameters {
        let k_bar = grads.wrt(graph.k)?;
        gram_hyper_gradient(&model.prior, &gram.times, &k_bar)?
    } else {
        Vec::new()
    };
    Ok(ElboGradient {
        elbo: graph.elbo,
        encoder,
        decoder,
        hyperparameters: hyper,
    })
}

/// `Σ K̄ ⊙ ∂K/∂θ` with `∂K/∂θ` from central differences of the Gram.
fn gram_hyper_gradient(prior: &LatentPrior, times: &[f64], k_bar: &DMatrix<f64>) -> Result<Vec<f64>> {
    let theta = prior.hyperparameters();
    (0..theta.len())
        .map(|j| {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[j] += HYPER_FD_STEP;
            lo[j] -= HYPER_FD_STEP;
            let k_hi = prior.with_hyperparameters(&hi)?.gram(times)?.matrix;
            let k_lo = prior.with_hyperparameters(&lo)?.gram(times)?.matrix;
            let dk = (k_hi - k_lo) / (2.0 * HYPER_FD_STEP);
            Ok(k_bar.component_mul(&dk).sum())
        })
        .collect()
}
