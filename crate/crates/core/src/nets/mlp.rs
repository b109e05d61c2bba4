use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nets::tape::{NodeId, Tape, PROB_CLAMP};
use crate::numerics::RngStream;

/// One tanh hidden layer followed by an affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `hidden x input`
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `output x hidden`
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Layer widths `(input, hidden, output)`.
pub type LayerSizes = (usize, usize, usize);

impl MlpParams {
    pub fn zeros((input, hidden, output): LayerSizes) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, input),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(output, hidden),
            b2: DVector::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot((input, hidden, output): LayerSizes, rng: &mut RngStream) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            // Row-major fill so the draw order does not depend on storage layout.
            let vals: Vec<f64> = (0..rows * cols)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            DMatrix::from_row_slice(rows, cols, &vals)
        };
        let w1 = uniform(hidden, input);
        let w2 = uniform(output, hidden);
        Self {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(output),
        }
    }

    pub fn sizes(&self) -> LayerSizes {
        (self.w1.ncols(), self.w1.nrows(), self.w2.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let (input, hidden, output) = self.sizes();
        if self.b1.len() != hidden || self.w2.ncols() != hidden || self.b2.len() != output {
            return Err(Error::dims(
                "mlp parameters",
                format!("{input}->{hidden}->{output}"),
                format!(
                    "b1 {}, w2 {}x{}, b2 {}",
                    self.b1.len(),
                    self.w2.nrows(),
                    self.w2.ncols(),
                    self.b2.len()
                ),
            ));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("mlp parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Records the parameters as leaves on `tape`.
    pub fn record(&self, tape: &mut Tape) -> MlpNodes {
        MlpNodes {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(row(&self.b1)),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(row(&self.b2)),
        }
    }

    /// Pre-activation output for a batch `x` (`n x input`).
    pub fn forward_linear(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (input, _, _) = self.sizes();
        if x.ncols() != input {
            return Err(Error::dims("mlp input", input, x.ncols()));
        }
        let mut h = x * self.w1.transpose();
        for mut r in h.row_iter_mut() {
            r += self.b1.transpose();
            r.apply(|v| *v = v.tanh());
        }
        let mut out = h * self.w2.transpose();
        for mut r in out.row_iter_mut() {
            r += self.b2.transpose();
        }
        Ok(out)
    }
}

fn row(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

/// Tape handles of one network's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl MlpNodes {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// `tanh(x W1ᵀ + b1) W2ᵀ + b2`.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let pre = tape.affine(x, self.w1, self.b1)?;
        let h = tape.tanh(pre)?;
        tape.affine(h, self.w2, self.b2)
    }
}

/// Pseudo-observation heads for a batch of frames, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: DMatrix<f64>,
    pub log_sigma: DMatrix<f64>,
}

impl EncoderOutput {
    pub fn sigma(&self) -> DMatrix<f64> {
        self.log_sigma.map(f64::exp)
    }
}

/// Encodes every row of `frames` (`n x d²`).
pub fn encode_frames(params: &MlpParams, frames: &DMatrix<f64>) -> Result<EncoderOutput> {
    let out = params.forward_linear(frames)?;
    if out.ncols() % 2 != 0 {
        return Err(Error::dims("encoder output", "even width", out.ncols()));
    }
    let p = out.ncols() / 2;
    Ok(EncoderOutput {
        mu: out.columns(0, p).into_owned(),
        log_sigma: out.columns(p, p).into_owned(),
    })
}

pub fn encode(params: &MlpParams, frame: &[f64]) -> Result<EncoderOutput> {
    encode_frames(params, &DMatrix::from_row_slice(1, frame.len(), frame))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pixel probabilities for each row of `latents` (`n x p`), clamped away from 0 and 1.
pub fn decode_batch(params: &MlpParams, latents: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(params
        .forward_linear(latents)?
        .map(|v| sigmoid(v).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)))
}

pub fn decode(params: &MlpParams, y: &[f64]) -> Result<Vec<f64>> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("latent state must be finite".into()));
    }
    Ok(decode_batch(params, &DMatrix::from_row_slice(1, y.len(), y))?
        .as_slice()
        .to_vec())
}

pub fn bernoulli_loglik(v: &[f64], probs: &[f64]) -> f64 {
    v.iter()
        .zip(probs)
        .map(|(&v, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            v * p.ln() + (1.0 - v) * (1.0 - p).ln()
        })
        .sum()
}

/// `∂/∂ρ` of [`bernoulli_loglik`]; zero where the clamp is active.
pub fn bernoulli_loglik_grad(v: &[f64], probs: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(probs)
        .map(|(&v, &p)| {
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                0.0
            } else {
                v / p - (1.0 - v) / (1.0 - p)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_encoder_outputs_unit_sigma() {
        let params = MlpParams::zeros((16, 8, 4));
        let out = encode(&params, &[1.0; 16]).unwrap();
        assert!(out.mu.iter().all(|&v| v == 0.0));
        assert!(out.log_sigma.iter().all(|&v| v == 0.0));
        assert!(out.sigma().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn encoder_rejects_wrong_frame_size() {
        let params = MlpParams::zeros((16, 8, 4));
        assert!(matches!(
            encode(&params, &[0.0; 15]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_decoder_is_one_half() {
        let params = MlpParams::zeros((2, 8, 16));
        let probs = decode(&params, &[0.3, -2.0]).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn decoder_outputs_stay_open_interval() {
        let mut rng = RngStream::new(11);
        let params = MlpParams::glorot((2, 50, 30), &mut rng);
        for _ in 0..100 {
            let y = [rng.uniform_range(-1e3, 1e3), rng.uniform_range(-1e3, 1e3)];
            let probs = decode(&params, &y).unwrap();
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0 && p.is_finite()));
        }
    }

    #[test]
    fn bernoulli_half_probabilities() {
        let ll = bernoulli_loglik(&[1.0, 0.0, 1.0, 0.0], &[0.5; 4]);
        assert!((ll - 4.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((ll + 2.77259).abs() < 1e-5);
    }

    #[test]
    fn bernoulli_single_pixel() {
        assert!((bernoulli_loglik(&[1.0], &[0.3]) - 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_gradient_finite_differences() {
        let v = [1.0, 0.0, 1.0, 0.0, 1.0];
        let p = [0.2, 0.4, 0.7, 0.9, 0.55];
        let g = bernoulli_loglik_grad(&v, &p);
        let h = 1e-6;
        for k in 0..p.len() {
            let mut hi = p;
            let mut lo = p;
            hi[k] += h;
            lo[k] -= h;
            let fd = (bernoulli_loglik(&v, &hi) - bernoulli_loglik(&v, &lo)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "pixel {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = MlpParams::glorot((20, 10, 4), &mut RngStream::new(5));
        let b = MlpParams::glorot((20, 10, 4), &mut RngStream::new(5));
        assert_eq!(a, b);
        let frame: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let oa = encode(&a, &frame).unwrap();
        let ob = encode(&b, &frame).unwrap();
        assert_eq!(oa.mu.as_slice(), ob.mu.as_slice());
        assert_eq!(oa.log_sigma.as_slice(), ob.log_sigma.as_slice());
    }
}
