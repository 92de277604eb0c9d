//! Flow-matching training loop with a deterministic gradient reduction.
//!
//! Each batch element gets its own trace, so per-sample gradients can be
//! computed anywhere (the std crate spreads them over threads) and are
//! summed here in batch order.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::Graph;
use crate::conditioning::RawConditions;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::flow::{fm_loss, FlowSample, DEFAULT_COND_DROPOUT};
use crate::model::Mmhnet;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            seed: 0,
            cond_dropout: DEFAULT_COND_DROPOUT,
            optimizer: AdamWConfig::default(),
        }
    }
}

pub type Sample = FlowSample<RawConditions>;

/// Loss and parameter gradients of one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

pub fn sample_gradient(model: &Mmhnet, sample: &Sample) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let loss = fm_loss(&mut g, model, &p, core::slice::from_ref(sample))?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(SampleGrad { loss: value, grads: Vec::new() });
    }
    g.backward(loss)?;
    Ok(SampleGrad {
        loss: value,
        grads: model.params().gradients(&g, &p),
    })
}

/// Sequential per-sample evaluation.
pub fn sequential(model: &Mmhnet, batch: &[Sample]) -> Vec<Result<SampleGrad>> {
    batch.iter().map(|s| sample_gradient(model, s)).collect()
}

/// Draws the samples of one iteration: episode, time, noise and dropout
/// come from a stream keyed by `(seed, iteration)`.
pub fn draw_batch(config: &TrainConfig, iteration: usize, episodes: &[Episode]) -> Result<(Vec<usize>, Vec<Sample>)> {
    if episodes.is_empty() {
        return Err(Error::invalid("training needs at least one episode"));
    }
    let mut rng = seeded(derive_seed(&[config.seed, iteration as u64, 0x7A41]));
    let mut idx = Vec::with_capacity(config.batch_size);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let i = rng.random_range(0..episodes.len());
        let e = &episodes[i];
        let t = rng.random::<f64>();
        let x0 = normal_tensor(&mut rng, e.len(), e.audio.cols(), 1.0);
        let null = rng.random::<f64>() < config.cond_dropout;
        idx.push(i);
        batch.push(FlowSample {
            x0,
            x1: e.audio.clone(),
            t,
            cond: e.conditions(),
            null,
        });
    }
    Ok((idx, batch))
}

pub struct Trainer {
    pub config: TrainConfig,
    optimizer: AdamW,
    iteration: usize,
    /// Episode indices of the most recent batch.
    pub last_batch: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Mmhnet) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&config.cond_dropout) {
            return Err(Error::Domain { op: "cond_dropout", index: 0 });
        }
        Ok(Self {
            config,
            optimizer: AdamW::new(config.optimizer, model.params().tensors()),
            iteration: 0,
            last_batch: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One optimizer step. `evaluate` returns one result per batch element,
    /// in batch order. Returns the mean batch loss before the update.
    pub fn step<E>(&mut self, model: &mut Mmhnet, episodes: &[Episode], evaluate: E) -> Result<f64>
    where
        E: FnOnce(&Mmhnet, &[Sample]) -> Vec<Result<SampleGrad>>,
    {
        let (idx, batch) = draw_batch(&self.config, self.iteration, episodes)?;
        self.last_batch = idx;
        let results = evaluate(model, &batch);
        if results.len() != batch.len() {
            return Err(Error::invalid("evaluator returned the wrong number of results"));
        }
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut total: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (k, r) in results.into_iter().enumerate() {
            let r = match r {
                Err(Error::NonFinite { .. }) => SampleGrad { loss: f64::NAN, grads: Vec::new() },
                other => other?,
            };
            if !r.loss.is_finite() || r.grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NanLoss {
                    iteration: self.iteration,
                    batch_index: k,
                });
            }
            loss += r.loss / n;
            for (acc, g) in total.iter_mut().zip(&r.grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b / n;
                }
            }
        }
        self.optimizer.step(model.params_mut().tensors_mut(), &total);
        self.iteration += 1;
        Ok(loss)
    }
}

/// Runs `config.iterations` sequential steps; returns the loss per iteration.
pub fn train(model: &mut Mmhnet, episodes: &[Episode], config: TrainConfig) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(config, model)?;
    (0..config.iterations).map(|_| trainer.step(model, episodes, sequential)).collect()
}

/// Flow times at which validation loss is measured.
pub const VALIDATION_TIMES: [f64; 4] = [0.125, 0.375, 0.625, 0.875];

/// Conditional FM loss averaged over episodes and [`VALIDATION_TIMES`],
/// with noise keyed by `(seed, episode index)`.
pub fn validation_loss(model: &Mmhnet, episodes: &[Episode], seed: u64) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::invalid("validation needs at least one episode"));
    }
    let mut total = 0.0;
    for (i, e) in episodes.iter().enumerate() {
        let mut rng = seeded(derive_seed(&[seed, i as u64, 0x5A11]));
        let x0 = normal_tensor(&mut rng, e.len(), e.audio.cols(), 1.0);
        let batch: Vec<Sample> = VALIDATION_TIMES
            .iter()
            .map(|&t| FlowSample {
                x0: x0.clone(),
                x1: e.audio.clone(),
                t,
                cond: e.conditions(),
                null: false,
            })
            .collect();
        let mut g = Graph::inference();
        let p = model.params().bind(&mut g, false);
        let l = fm_loss(&mut g, model, &p, &batch)?;
        total += g.value(l).item();
    }
    Ok(total / episodes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{condition_dims, make_split};
    use crate::model::{ModelConfig, Preset};

    fn small_model() -> Mmhnet {
        let mut c = ModelConfig::preset(Preset::Tiny, condition_dims(16));
        c.d_model = 16;
        c.dims.model = 16;
        c.n_heads = 2;
        c.d_state = 4;
        c.n_mm = 1;
        c.n_single = 1;
        Mmhnet::new(c, 1).unwrap()
    }

    #[test]
    fn zero_iterations_keep_init() {
        let mut m = small_model();
        let before = m.params().clone();
        let eps = make_split(1, 2, 16).unwrap();
        let losses = train(&mut m, &eps, TrainConfig { iterations: 0, ..Default::default() }).unwrap();
        assert!(losses.is_empty());
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn nan_loss_reports_position() {
        let mut m = small_model();
        let mut eps = make_split(1, 2, 16).unwrap();
        for e in &mut eps {
            e.audio.data_mut()[0] = f64::NAN;
        }
        let cfg = TrainConfig { iterations: 1, batch_size: 2, ..Default::default() };
        let err = train(&mut m, &eps, cfg).unwrap_err();
        assert_eq!(err, Error::NanLoss { iteration: 0, batch_index: 0 });
    }
}
