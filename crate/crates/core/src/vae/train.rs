use std::fmt::Write as _;

use rayon::prelude::*;

use crate::datagen::VideoSequence;
use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::nets::{AdamState, MlpParams};
use crate::numerics::RngStream;
use crate::vae::{elbo_gradient, ElboBreakdown, ElboGradient, Model};

/// RNG stream offsets, so noise, shuffles and initialization never overlap.
const EPOCH_STREAMS: u64 = 1 << 40;
const NOISE_STREAMS: u64 = 1 << 41;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub sequences_per_step: usize,
    pub train_hyperparams: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            learning_rate: 1e-3,
            mc_samples: 1,
            seed: 0,
            sequences_per_step: 1,
            train_hyperparams: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || self.sequences_per_step == 0 {
            return Err(Error::InvalidArgument(
                "mc_samples and sequences_per_step must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

pub const TRACE_HEADER: &str = "iteration,reconstruction,entropy_term,log_marginal,total";

/// Per-iteration ELBO values, iteration numbers starting at 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElboTrace {
    pub rows: Vec<ElboBreakdown>,
}

impl ElboTrace {
    pub fn csv_row(iteration: usize, e: &ElboBreakdown) -> String {
        format!(
            "{iteration},{:.17e},{:.17e},{:.17e},{:.17e}",
            e.reconstruction, e.entropy_term, e.log_marginal, e.total
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRACE_HEADER}\n");
        for (i, e) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{}", Self::csv_row(i + 1, e));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("loss trace", d);
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(bad("unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let v: Vec<f64> = line
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("row {}: {e}", k + 1)))?;
            if v.len() != 5 || v[0] as usize != k + 1 {
                return Err(bad(format!("row {} malformed", k + 1)));
            }
            rows.push(ElboBreakdown {
                reconstruction: v[1],
                entropy_term: v[2],
                log_marginal: v[3],
                total: v[4],
            });
        }
        Ok(Self { rows })
    }

    /// Trailing moving average of the totals with the given window.
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut out = Vec::with_capacity(self.rows.len());
        let mut acc = 0.0;
        for (i, e) in self.rows.iter().enumerate() {
            acc += e.total;
            if i >= window {
                acc -= self.rows[i - window].total;
            }
            out.push(acc / (i + 1).min(window) as f64);
        }
        out
    }
}

/// Stateful optimizer loop. Everything random is derived from `(seed, step)`,
/// so a trainer restored from a checkpoint continues the original run exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    gram: Option<GramMatrix>,
    order: Option<(usize, Vec<usize>)>,
}

const PARAM_NAMES: [&str; 9] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "decoder.w1",
    "decoder.b1",
    "decoder.w2",
    "decoder.b2",
    "kernel.hyperparameters",
];

fn block_sizes(model: &Model, hyper: bool) -> Vec<usize> {
    let mut sizes: Vec<usize> = model
        .encoder
        .slices()
        .iter()
        .chain(model.decoder.slices().iter())
        .map(|s| s.len())
        .collect();
    if hyper {
        sizes.push(model.prior.hyperparameters().len());
    }
    sizes
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let adam = AdamState::new(&block_sizes(&model, config.train_hyperparams), config.learning_rate);
        Ok(Self {
            model,
            adam,
            config,
            gram: None,
            order: None,
        })
    }

    /// Resumes from saved parameters and optimizer moments.
    pub fn resume(model: Model, adam: AdamState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if adam.block_sizes() != block_sizes(&model, config.train_hyperparams) {
            return Err(Error::format(
                "checkpoint",
                "optimizer state does not match the model layout",
            ));
        }
        let mut adam = adam;
        adam.learning_rate = config.learning_rate;
        Ok(Self {
            model,
            adam,
            config,
            gram: None,
            order: None,
        })
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> usize {
        self.adam.step as usize
    }

    fn master(&self) -> RngStream {
        RngStream::new(self.config.seed)
    }

    fn sequence_for(&mut self, slot: usize, n_v: usize) -> usize {
        let epoch = slot / n_v;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..n_v).collect();
            self.master()
                .child(EPOCH_STREAMS + epoch as u64)
                .shuffle(&mut order);
            self.order = Some((epoch, order));
        }
        self.order.as_ref().expect("order just set").1[slot % n_v]
    }

    fn gram_for(&mut self, times: &[f64]) -> Result<GramMatrix> {
        let fresh = match &self.gram {
            Some(g) => {
                self.config.train_hyperparams
                    || g.times.len() != times.len()
                    || g.times.iter().zip(times).any(|(a, b)| (a - b).abs() > 1e-9)
            }
            None => true,
        };
        if fresh {
            self.gram = Some(self.model.prior.gram(times)?);
        }
        Ok(self.gram.clone().expect("gram just set"))
    }

    /// One Adam step on the next sequence(s); returns the (averaged) ELBO before the update.
    pub fn step(&mut self, data: &[VideoSequence]) -> Result<ElboBreakdown> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let iteration = self.step_count();
        let spp = self.config.sequences_per_step;
        let picks: Vec<usize> = (0..spp)
            .map(|j| self.sequence_for(iteration * spp + j, data.len()))
            .collect();
        let times = data[picks[0]].timestamps();
        if picks.iter().any(|&i| data[i].timestamps() != times) {
            return Err(Error::InvalidGrid(
                "sequences in one step must share timestamps".into(),
            ));
        }
        let gram = self.gram_for(&times)?;
        let master = self.master();
        let model = &self.model;
        let cfg = &self.config;
        let results: Vec<Result<ElboGradient>> = picks
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut rng = master.child(NOISE_STREAMS + (iteration * spp + j) as u64);
                elbo_gradient(&data[i], model, &gram, cfg.mc_samples, cfg.train_hyperparams, &mut rng)
            })
            .collect();
        let divergence = |what: String| Error::Divergence {
            iteration: iteration + 1,
            what,
        };
        let mut grads = Vec::with_capacity(spp);
        for r in results {
            match r {
                Ok(g) => grads.push(g),
                Err(Error::Divergence { what, .. }) => return Err(divergence(what)),
                Err(e) => return Err(e),
            }
        }
        // Fixed-order reduction keeps results independent of thread scheduling.
        let scale = 1.0 / spp as f64;
        let mut enc = MlpParams::zeros(self.model.encoder.sizes());
        let mut dec = MlpParams::zeros(self.model.decoder.sizes());
        let mut hyper = vec![0.0; if cfg.train_hyperparams { model.prior.hyperparameters().len() } else { 0 }];
        let mut elbo = ElboBreakdown {
            reconstruction: 0.0,
            entropy_term: 0.0,
            log_marginal: 0.0,
            total: 0.0,
        };
        for g in &grads {
            accumulate(&mut enc, &g.encoder, -scale);
            accumulate(&mut dec, &g.decoder, -scale);
            for (h, v) in hyper.iter_mut().zip(&g.hyperparameters) {
                *h -= scale * v;
            }
            elbo.reconstruction += scale * g.elbo.reconstruction;
            elbo.entropy_term += scale * g.elbo.entropy_term;
            elbo.log_marginal += scale * g.elbo.log_marginal;
        }
        elbo.total = elbo.reconstruction + elbo.entropy_term + elbo.log_marginal;
        if !elbo.total.is_finite() {
            return Err(divergence("non-finite ELBO".into()));
        }

        let mut theta = self.model.prior.hyperparameters();
        {
            let [ew1, eb1, ew2, eb2] = self.model.encoder.slices_mut();
            let [dw1, db1, dw2, db2] = self.model.decoder.slices_mut();
            let mut params: Vec<&mut [f64]> = vec![ew1, eb1, ew2, eb2, dw1, db1, dw2, db2];
            let mut grad_refs: Vec<&[f64]> = enc.slices().into_iter().chain(dec.slices()).collect();
            if cfg.train_hyperparams {
                params.push(&mut theta);
                grad_refs.push(&hyper);
            }
            let names = &PARAM_NAMES[..params.len()];
            self.adam
                .step(&mut params, &grad_refs, names)
                .map_err(|e| match e {
                    Error::Divergence { what, .. } => divergence(what),
                    e => e,
                })?;
        }
        if self.config.train_hyperparams {
            self.model.prior = self.model.prior.with_hyperparameters(&theta)?;
        }
        Ok(elbo)
    }

    /// Steps until `until` total iterations, calling `on_step(iteration, elbo, trainer)` after each.
    pub fn run_until(
        &mut self,
        data: &[VideoSequence],
        until: usize,
        mut on_step: impl FnMut(usize, &ElboBreakdown, &Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.step_count() < until {
            let e = self.step(data)?;
            on_step(self.step_count(), &e, self)?;
        }
        Ok(())
    }
}

fn accumulate(acc: &mut MlpParams, g: &MlpParams, scale: f64) {
    for (a, g) in acc.slices_mut().into_iter().zip(g.slices()) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += scale * y;
        }
    }
}

/// Trains `model` for `config.iterations` steps; returns the trained model and its ELBO trace.
pub fn train(data: &[VideoSequence], config: &TrainConfig, model: Model) -> Result<(Model, ElboTrace)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut trace = ElboTrace::default();
    trainer.run_until(data, config.iterations, |_, e, _| {
        trace.rows.push(*e);
        Ok(())
    })?;
    Ok((trainer.model, trace))
}
