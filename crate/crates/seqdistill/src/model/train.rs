//! Plain SGD with global-norm gradient clipping and dev-driven learning
//! rate decay; always returns the best-dev checkpoint.

use rand_chacha::ChaCha8Rng;

use rand::SeedableRng;

use crate::data::{batch_iterator_weighted, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::loss::{batch_loss_graph, perplexity, LossKind};
use crate::model::net::{BoundParams, Dropout};
use crate::model::ModelParams;
use crate::seed::mix;
use crate::tensor::Tape;

/// When the learning rate is multiplied by `lr_decay`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayTrigger {
    /// After any epoch whose dev perplexity fails to improve on the best.
    DevPplWorse,
    /// After every epoch from this one onward.
    FixedEpoch(usize),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_trigger: DecayTrigger,
    pub grad_clip_norm: f64,
    pub init_range: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 13,
            batch_size: 32,
            learning_rate: 1.0,
            lr_decay: 0.5,
            decay_trigger: DecayTrigger::DevPplWorse,
            grad_clip_norm: 5.0,
            init_range: 0.1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Token-weighted mean objective over the epoch's batches.
    pub train_loss: f64,
    pub dev_ppl: f64,
    /// Learning rate the epoch was run with.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_ppl: f64,
}

/// One pass over the corpus: forward, backward, clip, update, repeat.
/// `after_update` runs after every parameter update (pruning re-masks).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgd_epoch(
    params: &mut ModelParams,
    corpus: &ParallelCorpus,
    weights: Option<&[f64]>,
    loss: &LossKind<'_>,
    lr: f64,
    clip: f64,
    batch_size: usize,
    epoch: usize,
    seed: u64,
    after_update: &mut dyn FnMut(&mut ModelParams),
) -> Result<f64> {
    let batches =
        batch_iterator_weighted(corpus, weights, batch_size, true, Some(mix(seed, epoch as u64)));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5eed_d40b, epoch as u64));
    let mut loss_weighted = 0.0;
    let mut tokens = 0usize;
    for (bi, batch) in batches.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, true);
        let mut dropout = if params.cfg.dropout_rate > 0.0 {
            Some(Dropout {
                rng: &mut dropout_rng,
                rate: params.cfg.dropout_rate,
            })
        } else {
            None
        };
        let out = batch_loss_graph(&mut tape, &bound, batch, loss, &mut dropout)?;
        let loss_val = tape.value(out.mean).item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: bi });
        }
        tape.backward(out.mean)?;
        sgd_step(params, &tape, &bound, lr, clip);
        after_update(params);
        loss_weighted += loss_val * out.token_count as f64;
        tokens += out.token_count;
    }
    Ok(loss_weighted / tokens as f64)
}

fn sgd_step(params: &mut ModelParams, tape: &Tape, bound: &BoundParams, lr: f64, clip: f64) {
    let grads: Vec<_> = bound
        .leaf_ids()
        .iter()
        .map(|&id| tape.grad(id).expect("parameter leaf gradient"))
        .collect();
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    let step = lr * scale;
    for ((_, tensor), grad) in params.named_tensors_mut().into_iter().zip(&grads) {
        for (w, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
            *w -= step * g;
        }
    }
}

/// SGD training with the configured decay schedule. Returns the parameters
/// that achieved the best dev perplexity (the initial parameters count).
pub fn train(
    params: ModelParams,
    train_corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    loss: &LossKind<'_>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    train_weighted(params, train_corpus, None, dev, loss, cfg)
}

/// `train` over a corpus with per-pair loss weights.
pub fn train_weighted(
    params: ModelParams,
    train_corpus: &ParallelCorpus,
    weights: Option<&[f64]>,
    dev: &ParallelCorpus,
    loss: &LossKind<'_>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let mut params = params;
    let mut best = params.clone();
    let mut log = TrainLog {
        best_dev_ppl: perplexity(&params, dev)?,
        ..Default::default()
    };
    let mut lr = cfg.learning_rate;
    for epoch in 1..=cfg.epochs {
        let train_loss = sgd_epoch(
            &mut params,
            train_corpus,
            weights,
            loss,
            lr,
            cfg.grad_clip_norm,
            cfg.batch_size,
            epoch,
            cfg.seed,
            &mut |_| {},
        )?;
        let dev_ppl = perplexity(&params, dev)?;
        let improved = dev_ppl < log.best_dev_ppl;
        if improved {
            log.best_dev_ppl = dev_ppl;
            log.best_epoch = epoch;
            best = params.clone();
        }
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            dev_ppl,
            learning_rate: lr,
        });
        match cfg.decay_trigger {
            DecayTrigger::DevPplWorse => {
                if !improved {
                    lr *= cfg.lr_decay;
                }
            }
            DecayTrigger::FixedEpoch(from) => {
                if epoch >= from {
                    lr *= cfg.lr_decay;
                }
            }
        }
    }
    Ok((best, log))
}

pub(crate) const FINE_TUNE_MAX_EPOCHS: usize = 5;
pub(crate) const FINE_TUNE_STALL: usize = 2;

/// Fixed-rate continuation training used for fine-tuning and pruning
/// retraining: no decay schedule, stop after `stall` epochs without a dev
/// improvement or `max_epochs` total, return the best-dev checkpoint.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fixed_lr_train(
    params: ModelParams,
    corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    loss: &LossKind<'_>,
    lr: f64,
    batch_size: usize,
    clip: f64,
    seed: u64,
    max_epochs: usize,
    stall: usize,
    after_update: &mut dyn FnMut(&mut ModelParams),
) -> Result<(ModelParams, TrainLog)> {
    let mut params = params;
    let mut best = params.clone();
    let mut log = TrainLog {
        best_dev_ppl: perplexity(&params, dev)?,
        ..Default::default()
    };
    let mut since_best = 0usize;
    for epoch in 1..=max_epochs {
        let train_loss = sgd_epoch(
            &mut params, corpus, None, loss, lr, clip, batch_size, epoch, seed, after_update,
        )?;
        let dev_ppl = perplexity(&params, dev)?;
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            dev_ppl,
            learning_rate: lr,
        });
        if dev_ppl < log.best_dev_ppl {
            log.best_dev_ppl = dev_ppl;
            log.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= stall {
                break;
            }
        }
    }
    Ok((best, log))
}

/// Continues SGD from a pretrained model at a fixed learning rate until
/// dev perplexity stalls for two epochs (five epochs at most).
pub fn fine_tune(
    params: ModelParams,
    corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    loss: &LossKind<'_>,
    lr: f64,
    seed: u64,
) -> Result<(ModelParams, TrainLog)> {
    let defaults = TrainConfig::default();
    fixed_lr_train(
        params,
        corpus,
        dev,
        loss,
        lr,
        defaults.batch_size,
        defaults.grad_clip_norm,
        seed,
        FINE_TUNE_MAX_EPOCHS,
        FINE_TUNE_STALL,
        &mut |_| {},
    )
}
