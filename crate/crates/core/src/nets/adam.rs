use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Adam moment estimates for a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(block_sizes: &[usize], learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }

    /// One descent step on `params` along `grads`.
    ///
    /// Nothing is modified if any gradient entry is non-finite; the error names
    /// the offending block.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[&str]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::dims(
                "adam blocks",
                self.first.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != self.first[k].len() {
                return Err(Error::dims(
                    "adam block",
                    self.first[k].len(),
                    format!("{} params / {} grads", p.len(), g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: self.step as usize,
                    what: format!(
                        "non-finite gradient for {}",
                        names.get(k).copied().unwrap_or("unnamed parameter")
                    ),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let step_size = self.learning_rate / bias1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= step_size * m[i] / ((v[i] / bias2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    names: &[&str],
) -> Result<()> {
    state.step(params, grads, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = AdamState::new(&[3], 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut state, &mut [&mut p], &[&[0.0; 3]], &["w"]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so Δ = -lr g / (|g| + ε).
        let lr = 1e-3;
        let mut state = AdamState::new(&[3], lr);
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        adam_step(&mut state, &mut [&mut p], &[&g], &["w"]).unwrap();
        for i in 0..3 {
            let expected = -lr * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15, "{} vs {expected}", p[i]);
            assert!((p[i] + lr * g[i].signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_calls_identical_results() {
        let mut a = AdamState::new(&[2], 1e-2);
        let mut b = a.clone();
        let mut pa = vec![0.1, 0.2];
        let mut pb = pa.clone();
        for g in [[0.3, -0.1], [1.0, 2.0]] {
            adam_step(&mut a, &mut [&mut pa], &[&g], &["w"]).unwrap();
            adam_step(&mut b, &mut [&mut pb], &[&g], &["w"]).unwrap();
        }
        assert_eq!(pa, pb);
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut state = AdamState::new(&[1, 2], 1e-3);
        let mut p1 = vec![0.0];
        let mut p2 = vec![0.0, 0.0];
        let err = adam_step(
            &mut state,
            &mut [&mut p1, &mut p2],
            &[&[0.0], &[1.0, f64::NAN]],
            &["enc.w1", "dec.b2"],
        )
        .unwrap_err();
        match err {
            Error::Divergence { what, .. } => assert!(what.contains("dec.b2")),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(state.step, 0);
    }
}
