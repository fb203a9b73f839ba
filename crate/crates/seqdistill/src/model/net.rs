//! Graph construction for the encoder-decoder, shared by training and
//! decoding so both run the exact same arithmetic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::IdMat;
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor, TensorId};

/// Additive score mask for padded source positions. Large enough that the
/// masked weight underflows to exactly 0 after softmax.
const PAD_SCORE: f64 = -1e30;

pub struct BoundLstm {
    w_in: TensorId,
    w_rec: TensorId,
    bias: TensorId,
}

/// Parameter leaves registered on a tape, mirroring `ModelParams`.
pub struct BoundParams {
    pub cfg: ModelConfig,
    src_embed: TensorId,
    tgt_embed: TensorId,
    enc: Vec<BoundLstm>,
    dec: Vec<BoundLstm>,
    attn_general: TensorId,
    attn_combine: TensorId,
    out_w: TensorId,
    out_b: TensorId,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> BoundParams {
        let mut bind = |t: &Tensor| tape.leaf(t.clone(), trainable);
        BoundParams {
            cfg: params.cfg.clone(),
            src_embed: bind(&params.src_embed),
            tgt_embed: bind(&params.tgt_embed),
            enc: params
                .enc
                .iter()
                .map(|p| BoundLstm {
                    w_in: bind(&p.w_in),
                    w_rec: bind(&p.w_rec),
                    bias: bind(&p.bias),
                })
                .collect(),
            dec: params
                .dec
                .iter()
                .map(|p| BoundLstm {
                    w_in: bind(&p.w_in),
                    w_rec: bind(&p.w_rec),
                    bias: bind(&p.bias),
                })
                .collect(),
            attn_general: bind(&params.attn_general),
            attn_combine: bind(&params.attn_combine),
            out_w: bind(&params.out_w),
            out_b: bind(&params.out_b),
        }
    }

    /// Leaf handles in the canonical `named_tensors` order.
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        let mut ids = vec![self.src_embed, self.tgt_embed];
        for p in &self.enc {
            ids.extend([p.w_in, p.w_rec, p.bias]);
        }
        for p in &self.dec {
            ids.extend([p.w_in, p.w_rec, p.bias]);
        }
        ids.extend([self.attn_general, self.attn_combine, self.out_w, self.out_b]);
        ids
    }
}

/// Per-layer dropout source during training. `None` means inference.
pub struct Dropout<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub rate: f64,
}

fn apply_dropout(
    tape: &mut Tape,
    x: TensorId,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<TensorId> {
    let Some(d) = dropout.as_mut() else {
        return Ok(x);
    };
    if d.rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - d.rate;
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

fn lstm_cell(
    tape: &mut Tape,
    p: &BoundLstm,
    hidden: usize,
    x: TensorId,
    c: TensorId,
    h: TensorId,
) -> Result<(TensorId, TensorId)> {
    let xs = tape.matmul(x, p.w_in)?;
    let hs = tape.matmul(h, p.w_rec)?;
    let lin = tape.add(xs, hs)?;
    let pre = tape.add_bias_row(lin, p.bias)?;
    let i_pre = tape.slice_cols(pre, 0, hidden)?;
    let f_pre = tape.slice_cols(pre, hidden, 2 * hidden)?;
    let g_pre = tape.slice_cols(pre, 2 * hidden, 3 * hidden)?;
    let o_pre = tape.slice_cols(pre, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((c_new, h_new))
}

/// Keeps a state row frozen once its sentence has ended:
/// out = valid * fresh + (1 - valid) * old.
fn masked_update(
    tape: &mut Tape,
    fresh: TensorId,
    old: TensorId,
    valid: TensorId,
    invalid: TensorId,
) -> Result<TensorId> {
    let keep_new = tape.mul(fresh, valid)?;
    let keep_old = tape.mul(old, invalid)?;
    tape.add(keep_new, keep_old)
}

/// Encoder output on a tape: per-position top-layer states, the additive
/// attention mask, and per-layer final states.
pub struct EncodedGraph {
    /// One `[B x H]` annotation per source position.
    pub annotations: Vec<TensorId>,
    /// `[B x I]` additive mask: 0 over real tokens, `PAD_SCORE` over pads.
    pub attn_bias: TensorId,
    /// Final (cell, hidden) per layer, frozen at each sentence's last token.
    pub finals: Vec<(TensorId, TensorId)>,
}

pub fn encode_graph(
    tape: &mut Tape,
    bp: &BoundParams,
    src: &IdMat,
    src_lens: &[usize],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<EncodedGraph> {
    let b = src.rows;
    let h = bp.cfg.hidden;
    let zero = tape.constant(Tensor::zeros(&[b, h]));
    let mut cells = vec![zero; bp.cfg.layers];
    let mut hiddens = vec![zero; bp.cfg.layers];
    let mut annotations = Vec::with_capacity(src.cols);

    for t in 0..src.cols {
        let ids = src.column(t);
        let x = tape.gather(bp.src_embed, &ids)?;
        let step_valid: Vec<f64> = src_lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
        let masks = if step_valid.iter().any(|&v| v == 0.0) {
            let valid: Vec<f64> = step_valid.iter().flat_map(|&v| vec![v; h]).collect();
            let invalid: Vec<f64> = valid.iter().map(|&v| 1.0 - v).collect();
            Some((
                tape.constant(Tensor::new(vec![b, h], valid)?),
                tape.constant(Tensor::new(vec![b, h], invalid)?),
            ))
        } else {
            None
        };
        let mut input = x;
        for l in 0..bp.cfg.layers {
            if l > 0 {
                input = apply_dropout(tape, input, dropout)?;
            }
            let (c_new, h_new) = lstm_cell(tape, &bp.enc[l], h, input, cells[l], hiddens[l])?;
            let (c_next, h_next) = match masks {
                Some((valid, invalid)) => (
                    masked_update(tape, c_new, cells[l], valid, invalid)?,
                    masked_update(tape, h_new, hiddens[l], valid, invalid)?,
                ),
                None => (c_new, h_new),
            };
            cells[l] = c_next;
            hiddens[l] = h_next;
            input = h_next;
        }
        annotations.push(hiddens[bp.cfg.layers - 1]);
    }

    let bias: Vec<f64> = (0..b)
        .flat_map(|r| (0..src.cols).map(move |t| if t < src_lens[r] { 0.0 } else { PAD_SCORE }))
        .collect();
    let attn_bias = tape.constant(Tensor::new(vec![b, src.cols], bias)?);
    Ok(EncodedGraph {
        annotations,
        attn_bias,
        finals: cells.into_iter().zip(hiddens).collect(),
    })
}

/// Decoder recurrent state handles on a tape.
pub struct StateIds {
    pub layers: Vec<(TensorId, TensorId)>,
    /// Previous attentional hidden state (input feeding), `[B x H]`.
    pub feed: TensorId,
}

impl StateIds {
    /// Initial decoder state: encoder finals, zero input feed.
    pub fn from_encoder(tape: &mut Tape, enc: &EncodedGraph, batch: usize, hidden: usize) -> StateIds {
        StateIds {
            layers: enc.finals.clone(),
            feed: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// One decode step's outputs on the tape.
pub struct StepGraph {
    /// Unnormalized scores over the target vocabulary, `[B x V]`.
    pub logits: TensorId,
    /// Attention weights over source positions, `[B x I]`.
    pub attn: TensorId,
    pub state: StateIds,
}

pub fn decode_step_graph(
    tape: &mut Tape,
    bp: &BoundParams,
    prev_ids: &[usize],
    state: &StateIds,
    annotations: &[TensorId],
    attn_bias: TensorId,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<StepGraph> {
    let h = bp.cfg.hidden;
    let x = tape.gather(bp.tgt_embed, prev_ids)?;
    let mut input = tape.concat_cols(&[x, state.feed])?;
    let mut new_layers = Vec::with_capacity(bp.cfg.layers);
    for l in 0..bp.cfg.layers {
        if l > 0 {
            input = apply_dropout(tape, input, dropout)?;
        }
        let (c, hid) = lstm_cell(tape, &bp.dec[l], h, input, state.layers[l].0, state.layers[l].1)?;
        new_layers.push((c, hid));
        input = hid;
    }
    let h_top = input;

    // Bilinear score per source position: (h_t W_a) . annotation,
    // realized as an elementwise product followed by a row sum.
    let u = tape.matmul(h_top, bp.attn_general)?;
    let ones_col = tape.constant(Tensor::matrix(h, 1, vec![1.0; h])?);
    let mut score_cols = Vec::with_capacity(annotations.len());
    for &ann in annotations {
        let prod = tape.mul(u, ann)?;
        score_cols.push(tape.matmul(prod, ones_col)?);
    }
    let scores = tape.concat_cols(&score_cols)?;
    let masked = tape.add(scores, attn_bias)?;
    let attn = tape.softmax(masked);

    // Context: attention-weighted sum of annotations; each weight column is
    // tiled across the hidden dimension with a ones-row product.
    let ones_row = tape.constant(Tensor::matrix(1, h, vec![1.0; h])?);
    let mut context: Option<TensorId> = None;
    for (s, &ann) in annotations.iter().enumerate() {
        let w_col = tape.slice_cols(attn, s, s + 1)?;
        let tiled = tape.matmul(w_col, ones_row)?;
        let term = tape.mul(tiled, ann)?;
        context = Some(match context {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let context = context.expect("at least one source position");

    let cat = tape.concat_cols(&[context, h_top])?;
    let combined = tape.matmul(cat, bp.attn_combine)?;
    let h_tilde = tape.tanh(combined);
    let proj = tape.matmul(h_tilde, bp.out_w)?;
    let logits = tape.add_bias_row(proj, bp.out_b)?;
    Ok(StepGraph {
        logits,
        attn,
        state: StateIds {
            layers: new_layers,
            feed: h_tilde,
        },
    })
}

/// Log-distribution over the vocabulary: log(softmax(logits)).
pub fn log_softmax(tape: &mut Tape, logits: TensorId) -> TensorId {
    let sm = tape.softmax(logits);
    tape.log(sm)
}

// ---------------------------------------------------------------------
// Value-level views used by decoding, where the tape is a scratch space.
// ---------------------------------------------------------------------

/// Encoder output as plain values.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub annotations: Vec<Tensor>,
    pub attn_bias: Tensor,
}

impl EncodedSource {
    pub fn batch(&self) -> usize {
        self.attn_bias.rows()
    }

    /// Repeats a single-sentence encoding across `k` beam rows.
    pub fn tile_rows(&self, k: usize) -> EncodedSource {
        EncodedSource {
            annotations: self.annotations.iter().map(|a| a.tile_rows(k)).collect(),
            attn_bias: self.attn_bias.tile_rows(k),
        }
    }
}

/// Decoder recurrent state as plain values.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<(Tensor, Tensor)>,
    pub feed: Tensor,
}

impl DecoderState {
    /// Reorders/duplicates state rows (beam bookkeeping).
    pub fn select_rows(&self, idx: &[usize]) -> DecoderState {
        DecoderState {
            layers: self
                .layers
                .iter()
                .map(|(c, h)| (c.select_rows(idx), h.select_rows(idx)))
                .collect(),
            feed: self.feed.select_rows(idx),
        }
    }

    pub fn tile_rows(&self, k: usize) -> DecoderState {
        DecoderState {
            layers: self
                .layers
                .iter()
                .map(|(c, h)| (c.tile_rows(k), h.tile_rows(k)))
                .collect(),
            feed: self.feed.tile_rows(k),
        }
    }
}

/// Reusable inference context: parameters are bound to the tape once, and
/// every call truncates the tape back so memory stays bounded.
pub struct DecodeSession<'p> {
    pub params: &'p ModelParams,
    tape: Tape,
    bound: BoundParams,
    base: usize,
}

impl<'p> DecodeSession<'p> {
    pub fn new(params: &'p ModelParams) -> DecodeSession<'p> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let base = tape.len();
        DecodeSession {
            params,
            tape,
            bound,
            base,
        }
    }

    /// Encodes a batch of source rows, returning value-level results.
    pub fn encode(&mut self, src: &IdMat, src_lens: &[usize]) -> Result<(EncodedSource, DecoderState)> {
        let enc = encode_graph(&mut self.tape, &self.bound, src, src_lens, &mut None)?;
        let annotations = enc.annotations.iter().map(|&a| self.tape.value(a).clone()).collect();
        let attn_bias = self.tape.value(enc.attn_bias).clone();
        let hidden = self.bound.cfg.hidden;
        let state = DecoderState {
            layers: enc
                .finals
                .iter()
                .map(|&(c, h)| (self.tape.value(c).clone(), self.tape.value(h).clone()))
                .collect(),
            feed: Tensor::zeros(&[src.rows, hidden]),
        };
        self.tape.truncate(self.base);
        Ok((EncodedSource { annotations, attn_bias }, state))
    }

    /// One decoder step over value-level state. Returns the per-row
    /// log-distribution, the attention weights, and the next state.
    pub fn step(
        &mut self,
        enc: &EncodedSource,
        state: &DecoderState,
        prev_ids: &[u32],
    ) -> Result<(Tensor, Tensor, DecoderState)> {
        let tape = &mut self.tape;
        let ann_ids: Vec<TensorId> = enc
            .annotations
            .iter()
            .map(|a| tape.constant(a.clone()))
            .collect();
        let bias = tape.constant(enc.attn_bias.clone());
        let state_ids = StateIds {
            layers: state
                .layers
                .iter()
                .map(|(c, h)| (tape.constant(c.clone()), tape.constant(h.clone())))
                .collect(),
            feed: tape.constant(state.feed.clone()),
        };
        let prev: Vec<usize> = prev_ids.iter().map(|&i| i as usize).collect();
        let step = decode_step_graph(tape, &self.bound, &prev, &state_ids, &ann_ids, bias, &mut None)?;
        let logp_id = log_softmax(tape, step.logits);
        let logp = tape.value(logp_id).clone();
        let attn = tape.value(step.attn).clone();
        let next = DecoderState {
            layers: step
                .state
                .layers
                .iter()
                .map(|&(c, h)| (tape.value(c).clone(), tape.value(h).clone()))
                .collect(),
            feed: tape.value(step.state.feed).clone(),
        };
        self.tape.truncate(self.base);
        Ok((logp, attn, next))
    }
}

/// Encodes a padded source batch: per-position annotations plus the
/// initial decoder state. Fails if any id is out of vocabulary range.
pub fn encode(params: &ModelParams, src: &IdMat, src_lens: &[usize]) -> Result<(EncodedSource, DecoderState)> {
    DecodeSession::new(params).encode(src, src_lens)
}

/// Single decode step over plain values; pure given its inputs.
pub fn decode_step(
    params: &ModelParams,
    enc: &EncodedSource,
    state: &DecoderState,
    prev_ids: &[u32],
) -> Result<(Tensor, Tensor, DecoderState)> {
    DecodeSession::new(params).step(enc, state, prev_ids)
}
