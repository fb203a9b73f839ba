//! Teacher-forced losses, sequence scores, and perplexity.

use crate::data::{batch_iterator, Batch, IdMat, ParallelCorpus, BOS_ID};
use crate::error::{Error, Result};
use crate::model::net::{
    decode_step_graph, encode_graph, log_softmax, BoundParams, DecodeSession, Dropout, StateIds,
};
use crate::model::ModelParams;
use crate::tensor::{Tape, Tensor, TensorId};

const EVAL_BATCH: usize = 64;

/// Training objective for a batch.
pub enum LossKind<'a> {
    /// Mean negative log-likelihood of the gold tokens.
    Nll,
    /// `(1 - alpha) * NLL + alpha * KD`, where KD is the cross-entropy of
    /// the frozen teacher's next-token distribution under the student, both
    /// evaluated at the same gold-prefix positions. A temperature above 1
    /// anneals both distributions inside the KD term.
    WordKd {
        teacher: &'a ModelParams,
        alpha: f64,
        tau: f64,
    },
}

/// A loss graph plus the value-level numbers read off during the forward
/// pass. `mean` is the scalar node to differentiate.
pub struct BatchLoss {
    pub mean: TensorId,
    /// Sum over the batch of per-sentence gold NLL.
    pub nll_sum: f64,
    /// Gold NLL summed per sentence, in batch-row order.
    pub per_sentence_nll: Vec<f64>,
    pub token_count: usize,
}

/// The teacher's annealed next-token distribution at every gold-forced
/// step, as plain values (no gradient ever flows into the teacher).
fn teacher_step_distributions(
    teacher: &ModelParams,
    batch: &Batch,
    tau: f64,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, teacher, false);
    let enc = encode_graph(&mut tape, &bound, &batch.src, &batch.src_lens, &mut None)?;
    let mut state = StateIds::from_encoder(&mut tape, &enc, batch.size(), teacher.cfg.hidden);
    let mut out = Vec::with_capacity(batch.dec_input.cols);
    for j in 0..batch.dec_input.cols {
        let prev = batch.dec_input.column(j);
        let step = decode_step_graph(
            &mut tape,
            &bound,
            &prev,
            &state,
            &enc.annotations,
            enc.attn_bias,
            &mut None,
        )?;
        let logits = if tau == 1.0 {
            step.logits
        } else {
            tape.mul_scalar(step.logits, 1.0 / tau)
        };
        let q = tape.softmax(logits);
        out.push(tape.value(q).clone());
        state = step.state;
    }
    Ok(out)
}

/// Builds the teacher-forced loss for one batch on the given tape.
/// Pad positions contribute nothing to either term; both terms are means
/// over the non-pad target positions (gold tokens plus `</s>`).
pub fn batch_loss_graph(
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &Batch,
    kind: &LossKind<'_>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<BatchLoss> {
    let b = batch.size();
    let v = bound.cfg.tgt_vocab_size;
    let token_count = batch.token_count();
    // Normalizer for the objective; equals token_count for unit weights.
    let weighted_tokens: f64 = batch
        .row_weights
        .iter()
        .zip(&batch.tgt_lens)
        .map(|(&w, &l)| w * l as f64)
        .sum();

    let teacher_q = match kind {
        LossKind::Nll => None,
        LossKind::WordKd { teacher, tau, .. } => {
            if teacher.cfg.tgt_vocab_size != bound.cfg.tgt_vocab_size
                || teacher.cfg.src_vocab_size != bound.cfg.src_vocab_size
            {
                return Err(Error::Validation(format!(
                    "teacher/student vocabulary mismatch: {}x{} vs {}x{}",
                    teacher.cfg.src_vocab_size,
                    teacher.cfg.tgt_vocab_size,
                    bound.cfg.src_vocab_size,
                    bound.cfg.tgt_vocab_size
                )));
            }
            Some(teacher_step_distributions(teacher, batch, *tau)?)
        }
    };

    let enc = encode_graph(tape, bound, &batch.src, &batch.src_lens, dropout)?;
    let mut state = StateIds::from_encoder(tape, &enc, b, bound.cfg.hidden);

    let mut per_sentence_nll = vec![0.0; b];
    let mut gold_terms: Vec<TensorId> = Vec::with_capacity(batch.dec_input.cols);
    let mut kd_terms: Vec<TensorId> = Vec::with_capacity(batch.dec_input.cols);

    for j in 0..batch.dec_input.cols {
        let prev = batch.dec_input.column(j);
        let step = decode_step_graph(tape, bound, &prev, &state, &enc.annotations, enc.attn_bias, dropout)?;
        let logp = log_softmax(tape, step.logits);

        // One-hot gold targets (scaled by row weight) with pad rows zeroed.
        let mut onehot = vec![0.0; b * v];
        {
            let logp_val = tape.value(logp);
            for r in 0..b {
                if j < batch.tgt_lens[r] {
                    let gold = batch.dec_output.row(r)[j] as usize;
                    onehot[r * v + gold] = batch.row_weights[r];
                    per_sentence_nll[r] -= logp_val.row(r)[gold];
                }
            }
        }
        let onehot = tape.constant(Tensor::matrix(b, v, onehot)?);
        let picked = tape.mul(logp, onehot)?;
        gold_terms.push(tape.sum(picked));

        if let (Some(qs), LossKind::WordKd { tau, .. }) = (&teacher_q, kind) {
            let logp_tau = if *tau == 1.0 {
                logp
            } else {
                let scaled = tape.mul_scalar(step.logits, 1.0 / *tau);
                log_softmax(tape, scaled)
            };
            let mut q = qs[j].clone();
            for r in 0..b {
                let scale = if j < batch.tgt_lens[r] { batch.row_weights[r] } else { 0.0 };
                if scale != 1.0 {
                    for x in &mut q.data_mut()[r * v..(r + 1) * v] {
                        *x *= scale;
                    }
                }
            }
            let q = tape.constant(q);
            let weighted = tape.mul(logp_tau, q)?;
            kd_terms.push(tape.sum(weighted));
        }

        state = step.state;
    }

    let sum_chain = |tape: &mut Tape, terms: &[TensorId]| -> Result<TensorId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    };

    let gold_total = sum_chain(tape, &gold_terms)?;
    let mean_nll = tape.mul_scalar(gold_total, -1.0 / weighted_tokens);
    let mean = match kind {
        LossKind::Nll => mean_nll,
        LossKind::WordKd { alpha, .. } => {
            let kd_total = sum_chain(tape, &kd_terms)?;
            let mean_kd = tape.mul_scalar(kd_total, -1.0 / weighted_tokens);
            let data_part = tape.mul_scalar(mean_nll, 1.0 - alpha);
            let kd_part = tape.mul_scalar(mean_kd, *alpha);
            tape.add(data_part, kd_part)?
        }
    };

    Ok(BatchLoss {
        mean,
        nll_sum: per_sentence_nll.iter().sum(),
        per_sentence_nll,
        token_count,
    })
}

/// Mean gold-token NLL for a batch, with the per-sentence sums exposed.
#[derive(Debug, Clone)]
pub struct WordNll {
    pub mean: f64,
    pub per_sentence_sum: Vec<f64>,
    pub token_count: usize,
}

pub fn word_nll_loss(params: &ModelParams, batch: &Batch) -> Result<WordNll> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let out = batch_loss_graph(&mut tape, &bound, batch, &LossKind::Nll, &mut None)?;
    Ok(WordNll {
        mean: tape.value(out.mean).item(),
        per_sentence_sum: out.per_sentence_nll,
        token_count: out.token_count,
    })
}

/// Mixture loss value `(1 - alpha) * NLL + alpha * KD` for one batch.
pub fn word_kd_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    batch: &Batch,
    alpha: f64,
    tau: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
    }
    if tau < 1.0 {
        return Err(Error::Validation(format!("tau {tau} must be >= 1")));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, student, false);
    let kind = LossKind::WordKd { teacher, alpha, tau };
    let out = batch_loss_graph(&mut tape, &bound, batch, &kind, &mut None)?;
    Ok(tape.value(out.mean).item())
}

/// log p(target | source): the sum of per-step log-probabilities of each
/// target token under teacher forcing. Pass the `</s>`-terminated sequence
/// to score a complete hypothesis.
pub fn sequence_logprob(params: &ModelParams, src: &[u32], tgt: &[u32]) -> Result<f64> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Validation("sequence_logprob needs nonempty sequences".into()));
    }
    let v = params.cfg.tgt_vocab_size as u32;
    if let Some(&bad) = tgt.iter().find(|&&t| t >= v) {
        return Err(Error::Validation(format!("target id {bad} out of range")));
    }
    let mut session = DecodeSession::new(params);
    let src_mat = IdMat {
        rows: 1,
        cols: src.len(),
        ids: src.to_vec(),
    };
    let (enc, mut state) = session.encode(&src_mat, &[src.len()])?;
    let mut prev = BOS_ID;
    let mut total = 0.0;
    for &tok in tgt {
        let (logp, _, next) = session.step(&enc, &state, &[prev])?;
        total += logp.data()[tok as usize];
        state = next;
        prev = tok;
    }
    Ok(total)
}

/// exp(mean NLL per scored target token) over a corpus; `</s>` counts.
pub fn perplexity(params: &ModelParams, corpus: &ParallelCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Validation("perplexity of an empty corpus".into()));
    }
    let mut total_nll = 0.0;
    let mut tokens = 0usize;
    for batch in batch_iterator(corpus, EVAL_BATCH, true, None) {
        let out = word_nll_loss(params, &batch)?;
        total_nll += out.per_sentence_sum.iter().sum::<f64>();
        tokens += out.token_count;
    }
    Ok((total_nll / tokens as f64).exp())
}
