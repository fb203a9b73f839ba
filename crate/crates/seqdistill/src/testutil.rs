//! Shared fixtures for unit tests.

use crate::model::{init_params_with_range, ModelConfig, ModelParams};

/// A model whose next-token choice depends (almost) deterministically on
/// the previous target token alone: from `<s>` it walks `next[2]`,
/// `next[next[2]]`, ... with per-step probability within ~1e-20 of 1.
///
/// Construction: the target embedding is the identity, the decoder LSTM
/// turns the previous token's one-hot into (saturated) one-hot of its
/// successor via huge gate logits, everything else is zeroed, and the
/// output projection amplifies the surviving coordinate.
pub fn chain_model(src_vocab: usize, next: &[u32]) -> ModelParams {
    let v = next.len();
    let cfg = ModelConfig::new(1, v, src_vocab, v).with_dropout(0.0);
    let mut params = init_params_with_range(&cfg, 0, 0.0).expect("valid config");

    let big = 30.0;
    for (t, row) in params.tgt_embed.data_mut().chunks_mut(v).enumerate() {
        row[t] = 1.0;
    }
    // Decoder layer 0: input rows 0..v are the embedding part. Route the
    // one-hot of token t into the cell gate of coordinate next[t].
    {
        let w_in = params.dec[0].w_in.data_mut(); // [(v + v) x 4v]
        let cols = 4 * v;
        for t in 0..v {
            let g_col = 2 * v + next[t] as usize;
            w_in[t * cols + g_col] = big;
        }
    }
    {
        let bias = params.dec[0].bias.data_mut();
        for c in 0..v {
            bias[c] = big; // input gate open
            bias[v + c] = -big; // forget gate shut
            bias[3 * v + c] = big; // output gate open
        }
    }
    // h_tilde = tanh([context; h] W_c): pass h through, scaled up.
    {
        let w_c = params.attn_combine.data_mut(); // [2v x v]
        for t in 0..v {
            w_c[(v + t) * v + t] = 10.0;
        }
    }
    for (t, row) in params.out_w.data_mut().chunks_mut(v).enumerate() {
        row[t] = 80.0;
    }
    params
}

/// The token walk `chain_model` performs from `<s>` (id 2), ending at the
/// first `</s>` (id 3), `</s>` included.
pub fn chain_walk(next: &[u32], max_len: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut cur = 2u32;
    for _ in 0..max_len {
        cur = next[cur as usize];
        out.push(cur);
        if cur == 3 {
            break;
        }
    }
    out
}
