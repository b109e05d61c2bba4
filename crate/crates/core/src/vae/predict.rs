use nalgebra::{DMatrix, DVector};

use crate::datagen::VideoSequence;
use crate::error::{Error, Result};
use crate::gp::{condition, GpPosterior, PseudoObservations};
use crate::nets::{decode_batch, encode_frames};
use crate::vae::Model;

/// Posterior over the frame times and the decoded posterior-mean frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub posterior: GpPosterior,
    /// `n_frames x d²` pixel probabilities.
    pub frames: DMatrix<f64>,
}

fn pseudo_observations(seq: &VideoSequence, model: &Model) -> Result<PseudoObservations> {
    let heads = encode_frames(&model.encoder, &seq.frames_matrix())?;
    let mu = DVector::from_column_slice(heads.mu.as_slice());
    let sigma = DVector::from_column_slice(heads.sigma().as_slice());
    PseudoObservations::new(seq.timestamps(), mu, sigma)
}

pub fn reconstruct(seq: &VideoSequence, model: &Model) -> Result<Reconstruction> {
    model.validate()?;
    let obs = pseudo_observations(seq, model)?;
    let gram = model.prior.gram(&obs.times)?;
    let posterior = condition(&gram, &obs)?;
    let frames = decode_batch(&model.decoder, &posterior.mean_frames())?;
    Ok(Reconstruction { posterior, frames })
}

/// Posterior on the frame times followed by the same spacing up to `horizon`,
/// conditioned only on the observed frames.
pub fn extrapolate(seq: &VideoSequence, model: &Model, horizon: f64) -> Result<GpPosterior> {
    model.validate()?;
    let obs = pseudo_observations(seq, model)?;
    let last = *obs.times.last().expect("non-empty sequence");
    if !(horizon >= last - 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} precedes the last observation at {last}"
        )));
    }
    let mut times = obs.times.clone();
    let mut k = 1;
    loop {
        let t = last + k as f64 * seq.dt;
        if t > horizon + 1e-9 {
            break;
        }
        times.push(t);
        k += 1;
    }
    let gram = model.prior.gram(&times)?;
    condition(&gram, &obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentKind {
    /// Independent scale and offset per dimension.
    ScaleOffset,
    /// Each true dimension regressed on all recovered dimensions plus an offset.
    Affine,
}

/// Least-squares map from recovered latents onto ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `(p + 1) x p`: rows are the recovered dimensions then the offset.
    pub coefficients: DMatrix<f64>,
}

fn design(recovered: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = recovered.shape();
    DMatrix::from_fn(n, p + 1, |r, c| if c < p { recovered[(r, c)] } else { 1.0 })
}

fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    x.clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .map_err(|e| Error::Alignment(format!("least-squares fit failed: {e}")))
}

impl Alignment {
    /// Fits `truth ≈ [recovered, 1] · coefficients`, both `n x p`.
    pub fn fit(recovered: &DMatrix<f64>, truth: &DMatrix<f64>, kind: AlignmentKind) -> Result<Self> {
        if recovered.shape() != truth.shape() {
            return Err(Error::dims(
                "alignment",
                format!("{:?}", truth.shape()),
                format!("{:?}", recovered.shape()),
            ));
        }
        let (n, p) = truth.shape();
        if n < p + 1 {
            return Err(Error::Alignment(format!("{n} points cannot fit {} coefficients", p + 1)));
        }
        let coefficients = match kind {
            AlignmentKind::Affine => least_squares(&design(recovered), truth)?,
            AlignmentKind::ScaleOffset => {
                let mut c = DMatrix::zeros(p + 1, p);
                for d in 0..p {
                    let x = DMatrix::from_fn(n, 2, |r, k| if k == 0 { recovered[(r, d)] } else { 1.0 });
                    let fit = least_squares(&x, &truth.columns(d, 1).into_owned())?;
                    c[(d, d)] = fit[(0, 0)];
                    c[(p, d)] = fit[(1, 0)];
                }
                c
            }
        };
        Ok(Self { coefficients })
    }

    pub fn apply(&self, recovered: &DMatrix<f64>) -> DMatrix<f64> {
        design(recovered) * &self.coefficients
    }
}

/// Root mean square over all entries of `a - b`.
pub fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / a.len().max(1) as f64).sqrt()
}

/// RMSE after fitting an alignment on the same points.
pub fn aligned_rmse(recovered: &DMatrix<f64>, truth: &DMatrix<f64>, kind: AlignmentKind) -> Result<f64> {
    let align = Alignment::fit(recovered, truth, kind)?;
    Ok(rmse(&align.apply(recovered), truth))
}
