//! LSTM encoder-decoder with bilinear ("general") attention and input
//! feeding, plus teacher-forced losses, perplexity, and SGD training.

mod checkpoint;
mod loss;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, vocab_sha256, Checkpoint};
pub use loss::{
    perplexity, sequence_logprob, word_kd_loss, word_nll_loss, BatchLoss, LossKind, WordNll,
};
pub use net::{
    decode_step, encode, BoundParams, DecodeSession, DecoderState, EncodedGraph, EncodedSource,
    StateIds, StepGraph,
};
pub use train::{fine_tune, train, train_weighted, DecayTrigger, EpochStats, TrainConfig, TrainLog};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_INIT_RANGE: f64 = 0.1;

/// Architecture description; `embed_dim` must equal `hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Matched embedding/hidden sizes, the shape used throughout.
    pub fn new(layers: usize, hidden: usize, src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            layers,
            hidden,
            embed_dim: hidden,
            src_vocab_size,
            tgt_vocab_size,
            dropout_rate: 0.3,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.hidden < 1 {
            return Err(Error::Config("layers and hidden must be >= 1".into()));
        }
        if self.embed_dim != self.hidden {
            return Err(Error::Config(format!(
                "embed_dim {} must equal hidden {}",
                self.embed_dim, self.hidden
            )));
        }
        if self.src_vocab_size < 4 || self.tgt_vocab_size < 4 {
            return Err(Error::Config("vocabularies must include the four specials".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Decoder layer 0 consumes the token embedding concatenated with the
    /// previous attentional hidden state (input feeding).
    fn dec_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim + self.hidden
        } else {
            self.hidden
        }
    }

    fn enc_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden
        }
    }
}

/// One LSTM layer: input weights, recurrent weights, gate biases.
/// Gate order within the 4H columns is (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub bias: Tensor,
}

/// Every parameter tensor of one encoder-decoder, plus its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub enc: Vec<LstmParams>,
    pub dec: Vec<LstmParams>,
    pub attn_general: Tensor,
    pub attn_combine: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ModelParams {
    /// The documented (name, shape) set, in canonical order.
    pub fn shape_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let h = cfg.hidden;
        let mut table = vec![
            ("src_embed".to_string(), vec![cfg.src_vocab_size, cfg.embed_dim]),
            ("tgt_embed".to_string(), vec![cfg.tgt_vocab_size, cfg.embed_dim]),
        ];
        for l in 0..cfg.layers {
            table.push((format!("enc.l{l}.w_in"), vec![cfg.enc_input_dim(l), 4 * h]));
            table.push((format!("enc.l{l}.w_rec"), vec![h, 4 * h]));
            table.push((format!("enc.l{l}.bias"), vec![1, 4 * h]));
        }
        for l in 0..cfg.layers {
            table.push((format!("dec.l{l}.w_in"), vec![cfg.dec_input_dim(l), 4 * h]));
            table.push((format!("dec.l{l}.w_rec"), vec![h, 4 * h]));
            table.push((format!("dec.l{l}.bias"), vec![1, 4 * h]));
        }
        table.push(("attn.w_general".to_string(), vec![h, h]));
        table.push(("attn.w_combine".to_string(), vec![2 * h, h]));
        table.push(("out.w".to_string(), vec![h, cfg.tgt_vocab_size]));
        table.push(("out.b".to_string(), vec![1, cfg.tgt_vocab_size]));
        table
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("src_embed".to_string(), &self.src_embed),
            ("tgt_embed".to_string(), &self.tgt_embed),
        ];
        for (l, p) in self.enc.iter().enumerate() {
            out.push((format!("enc.l{l}.w_in"), &p.w_in));
            out.push((format!("enc.l{l}.w_rec"), &p.w_rec));
            out.push((format!("enc.l{l}.bias"), &p.bias));
        }
        for (l, p) in self.dec.iter().enumerate() {
            out.push((format!("dec.l{l}.w_in"), &p.w_in));
            out.push((format!("dec.l{l}.w_rec"), &p.w_rec));
            out.push((format!("dec.l{l}.bias"), &p.bias));
        }
        out.push(("attn.w_general".to_string(), &self.attn_general));
        out.push(("attn.w_combine".to_string(), &self.attn_combine));
        out.push(("out.w".to_string(), &self.out_w));
        out.push(("out.b".to_string(), &self.out_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("src_embed".to_string(), &mut self.src_embed),
            ("tgt_embed".to_string(), &mut self.tgt_embed),
        ];
        for (l, p) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc.l{l}.w_in"), &mut p.w_in));
            out.push((format!("enc.l{l}.w_rec"), &mut p.w_rec));
            out.push((format!("enc.l{l}.bias"), &mut p.bias));
        }
        for (l, p) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec.l{l}.w_in"), &mut p.w_in));
            out.push((format!("dec.l{l}.w_rec"), &mut p.w_rec));
            out.push((format!("dec.l{l}.bias"), &mut p.bias));
        }
        out.push(("attn.w_general".to_string(), &mut self.attn_general));
        out.push(("attn.w_combine".to_string(), &mut self.attn_combine));
        out.push(("out.w".to_string(), &mut self.out_w));
        out.push(("out.b".to_string(), &mut self.out_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Uniform [-range, +range] weights, zero biases except the LSTM forget
/// gate bias, which starts at 1. Deterministic given the seed.
pub fn init_params_with_range(cfg: &ModelConfig, seed: u64, range: f64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |shape: &[usize], rng: &mut ChaCha8Rng| -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if range == 0.0 { 0.0 } else { rng.gen_range(-range..range) })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("static shape")
    };
    let lstm_bias = |h: usize| -> Tensor {
        let mut data = vec![0.0; 4 * h];
        for v in &mut data[h..2 * h] {
            *v = 1.0;
        }
        Tensor::matrix(1, 4 * h, data).expect("static shape")
    };

    let h = cfg.hidden;
    let src_embed = uniform(&[cfg.src_vocab_size, cfg.embed_dim], &mut rng);
    let tgt_embed = uniform(&[cfg.tgt_vocab_size, cfg.embed_dim], &mut rng);
    let mut enc = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        enc.push(LstmParams {
            w_in: uniform(&[cfg.enc_input_dim(l), 4 * h], &mut rng),
            w_rec: uniform(&[h, 4 * h], &mut rng),
            bias: lstm_bias(h),
        });
    }
    let mut dec = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        dec.push(LstmParams {
            w_in: uniform(&[cfg.dec_input_dim(l), 4 * h], &mut rng),
            w_rec: uniform(&[h, 4 * h], &mut rng),
            bias: lstm_bias(h),
        });
    }
    Ok(ModelParams {
        cfg: cfg.clone(),
        src_embed,
        tgt_embed,
        enc,
        dec,
        attn_general: uniform(&[h, h], &mut rng),
        attn_combine: uniform(&[2 * h, h], &mut rng),
        out_w: uniform(&[h, cfg.tgt_vocab_size], &mut rng),
        out_b: Tensor::matrix(1, cfg.tgt_vocab_size, vec![0.0; cfg.tgt_vocab_size])
            .expect("static shape"),
    })
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    init_params_with_range(cfg, seed, DEFAULT_INIT_RANGE)
}

#[cfg(test)]
mod tests;
