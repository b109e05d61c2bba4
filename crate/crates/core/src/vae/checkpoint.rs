//! Binary checkpoint: header, layer-size table, then a little-endian f64 payload.
//!
//! ```text
//! magic "PEGP" | version u16 | kernel u8 | train_hyper u8 | seed u64 | step u64
//! | encoder (in, hidden, out) 3 x u32 | decoder (in, hidden, out) 3 x u32 | n_hyper u32
//! | f64: encoder w1 b1 w2 b2 | decoder w1 b1 w2 b2 | hyperparameters
//! | f64: adam learning_rate beta1 beta2 epsilon | adam first moments | adam second moments
//! ```
//! Matrices are stored column-major.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{KernelKind, LatentPrior};
use crate::nets::{AdamState, LayerSizes, MlpParams};
use crate::vae::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PEGP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Trained parameters plus everything needed to resume optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: KernelKind,
    pub seed: u64,
    pub train_hyperparams: bool,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub hyperparameters: Vec<f64>,
    pub adam: AdamState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint", "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn mlp(&mut self, (input, hidden, output): LayerSizes) -> Result<MlpParams> {
        Ok(MlpParams {
            w1: DMatrix::from_vec(hidden, input, self.f64s(hidden * input)?),
            b1: DVector::from_vec(self.f64s(hidden)?),
            w2: DMatrix::from_vec(output, hidden, self.f64s(output * hidden)?),
            b2: DVector::from_vec(self.f64s(output)?),
        })
    }
}

fn kind_code(kind: KernelKind) -> u8 {
    match kind {
        KernelKind::Physics => 0,
        KernelKind::SeBaseline => 1,
    }
}

impl Checkpoint {
    pub fn from_trainer(model: &Model, adam: &AdamState, seed: u64, train_hyperparams: bool) -> Self {
        Self {
            kind: model.prior.kind(),
            seed,
            train_hyperparams,
            encoder: model.encoder.clone(),
            decoder: model.decoder.clone(),
            hyperparameters: model.prior.hyperparameters(),
            adam: adam.clone(),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Rebuilds the model on top of `prior`, whose structure must match.
    pub fn model(&self, prior: &LatentPrior) -> Result<Model> {
        if prior.kind() != self.kind {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained with the {} kernel, not {}",
                self.kind.name(),
                prior.kind().name()
            )));
        }
        // exp(ln v) need not return v, so an unchanged prior is reused as is.
        let prior = if prior.hyperparameters() == self.hyperparameters {
            prior.clone()
        } else {
            prior.with_hyperparameters(&self.hyperparameters)?
        };
        let model = Model {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            prior,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(kind_code(self.kind));
        out.push(self.train_hyperparams as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        let (ei, eh, eo) = self.encoder.sizes();
        let (di, dh, do_) = self.decoder.sizes();
        for v in [ei, eh, eo, di, dh, do_, self.hyperparameters.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut push = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for s in self.encoder.slices().into_iter().chain(self.decoder.slices()) {
            push(s);
        }
        push(&self.hyperparameters);
        push(&[
            self.adam.learning_rate,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.epsilon,
        ]);
        for m in self.adam.first.iter().chain(&self.adam.second) {
            push(m);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "missing PEGP header"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => KernelKind::Physics,
            1 => KernelKind::SeBaseline,
            k => return Err(Error::format("checkpoint", format!("unknown kernel code {k}"))),
        };
        let train_hyperparams = r.u8()? != 0;
        let seed = r.u64()?;
        let step = r.u64()?;
        let enc = (r.u32()?, r.u32()?, r.u32()?);
        let dec = (r.u32()?, r.u32()?, r.u32()?);
        let n_hyper = r.u32()?;
        let encoder = r.mlp(enc)?;
        let decoder = r.mlp(dec)?;
        let hyperparameters = r.f64s(n_hyper)?;
        let consts = r.f64s(4)?;
        let mut sizes: Vec<usize> = encoder
            .slices()
            .iter()
            .chain(decoder.slices().iter())
            .map(|s| s.len())
            .collect();
        if train_hyperparams {
            sizes.push(n_hyper);
        }
        let mut adam = AdamState::new(&sizes, consts[0]);
        adam.step = step;
        adam.beta1 = consts[1];
        adam.beta2 = consts[2];
        adam.epsilon = consts[3];
        for m in adam.first.iter_mut().chain(adam.second.iter_mut()) {
            let n = m.len();
            *m = r.f64s(n)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            kind,
            seed,
            train_hyperparams,
            encoder,
            decoder,
            hyperparameters,
            adam,
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
