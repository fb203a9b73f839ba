//! Greedy decoding, beam search with K-best extraction, ancestral
//! sampling, K-best renormalization, and the mode-mass diagnostic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{IdMat, ParallelCorpus, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{DecodeSession, DecoderState, EncodedSource, ModelParams};

/// One decoded candidate. `alive` is true for hypotheses cut off at the
/// length limit; finished hypotheses end in `</s>` exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub alive: bool,
}

impl Hypothesis {
    pub fn is_finished(&self) -> bool {
        !self.alive
    }

    /// Tokens with the trailing `</s>` removed (storage form).
    pub fn content_tokens(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS_ID, rest)) if !self.alive => rest,
            _ => &self.tokens,
        }
    }
}

/// Completed hypotheses first (sorted by log-probability, ties broken by
/// lexicographic token order), then any length-capped fillers in the same
/// order. Never more than `beam_width` entries.
#[derive(Debug, Clone)]
pub struct KBestList {
    pub hypotheses: Vec<Hypothesis>,
    pub beam_width: usize,
}

impl KBestList {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Hard cap on generated tokens (`</s>` included).
    pub max_len: usize,
    /// Effective cap is `min(max_len, ceil(ratio * source_len))`.
    pub length_cap_ratio: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len: 50,
            length_cap_ratio: 2.0,
        }
    }
}

impl DecodeConfig {
    pub fn with_beam(mut self, beam: usize) -> Self {
        self.beam = beam;
        self
    }

    pub fn effective_max_len(&self, src_len: usize) -> usize {
        let by_ratio = (self.length_cap_ratio * src_len as f64).ceil() as usize;
        self.max_len.min(by_ratio).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 || self.max_len < 1 {
            return Err(Error::Config("beam and max_len must be >= 1".into()));
        }
        Ok(())
    }
}

fn encode_single<'p>(
    session: &mut DecodeSession<'p>,
    src: &[u32],
) -> Result<(EncodedSource, DecoderState)> {
    if src.is_empty() {
        return Err(Error::Validation("cannot decode an empty source".into()));
    }
    let mat = IdMat {
        rows: 1,
        cols: src.len(),
        ids: src.to_vec(),
    };
    session.encode(&mat, &[src.len()])
}

fn argmax_row(row: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    (best, best_v)
}

/// Follows the per-step argmax until `</s>` or the length cap. Ties pick
/// the smallest token id, matching beam search's tie-break.
pub fn greedy_decode(params: &ModelParams, src: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut session = DecodeSession::new(params);
    let (enc, mut state) = encode_single(&mut session, src)?;
    let max_len = cfg.effective_max_len(src.len());
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut prev = BOS_ID;
    for _ in 0..max_len {
        let (logp, _, next) = session.step(&enc, &state, &[prev])?;
        let (tok, lp) = argmax_row(logp.row(0));
        tokens.push(tok as u32);
        logprob += lp;
        if tok as u32 == EOS_ID {
            return Ok(Hypothesis {
                tokens,
                logprob,
                alive: false,
            });
        }
        prev = tok as u32;
        state = next;
    }
    Ok(Hypothesis {
        tokens,
        logprob,
        alive: true,
    })
}

struct BeamItem {
    tokens: Vec<u32>,
    logprob: f64,
}

fn by_score_then_tokens(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .expect("finite scores")
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search over accumulated log-probabilities (no length
/// normalization). Each step expands every alive hypothesis over the full
/// vocabulary and keeps the top `K` candidates; those emitting `</s>` move
/// to a completed pool, and the search runs until `K` have completed or the
/// length cap is hit. If fewer than `K` complete, the best length-capped
/// hypotheses pad the list.
pub fn beam_search(params: &ModelParams, src: &[u32], cfg: &DecodeConfig) -> Result<KBestList> {
    cfg.validate()?;
    let k = cfg.beam;
    let mut session = DecodeSession::new(params);
    let (enc1, state1) = encode_single(&mut session, src)?;
    let max_len = cfg.effective_max_len(src.len());

    let mut alive = vec![BeamItem {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut states = state1;
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if alive.is_empty() || completed.len() >= k {
            break;
        }
        let enc_k = if alive.len() == 1 {
            enc1.clone()
        } else {
            enc1.tile_rows(alive.len())
        };
        let prev: Vec<u32> = alive
            .iter()
            .map(|h| h.tokens.last().copied().unwrap_or(BOS_ID))
            .collect();
        let (logp, _, next_states) = session.step(&enc_k, &states, &prev)?;

        let vocab = logp.cols();
        let mut candidates: Vec<(f64, usize, u32)> = Vec::with_capacity(alive.len() * vocab);
        for (a, item) in alive.iter().enumerate() {
            let row = logp.row(a);
            for (v, &lp) in row.iter().enumerate() {
                candidates.push((item.logprob + lp, a, v as u32));
            }
        }
        candidates.sort_by(|x, y| {
            y.0.partial_cmp(&x.0).expect("finite scores").then_with(|| {
                // Lexicographic order of the resulting token sequences.
                let (xa, xv) = (&alive[x.1].tokens, x.2);
                let (ya, yv) = (&alive[y.1].tokens, y.2);
                xa.iter()
                    .chain(std::iter::once(&xv))
                    .cmp(ya.iter().chain(std::iter::once(&yv)))
            })
        });
        candidates.truncate(k);

        let mut new_alive = Vec::with_capacity(k);
        let mut kept_rows = Vec::with_capacity(k);
        for (score, a, v) in candidates {
            let mut tokens = alive[a].tokens.clone();
            tokens.push(v);
            if v == EOS_ID {
                completed.push(Hypothesis {
                    tokens,
                    logprob: score,
                    alive: false,
                });
            } else {
                new_alive.push(BeamItem {
                    tokens,
                    logprob: score,
                });
                kept_rows.push(a);
            }
        }
        states = next_states.select_rows(&kept_rows);
        alive = new_alive;
    }

    completed.sort_by(by_score_then_tokens);
    completed.truncate(k);
    if completed.len() < k {
        let mut fillers: Vec<Hypothesis> = alive
            .into_iter()
            .map(|item| Hypothesis {
                tokens: item.tokens,
                logprob: item.logprob,
                alive: true,
            })
            .collect();
        fillers.sort_by(by_score_then_tokens);
        fillers.truncate(k - completed.len());
        completed.extend(fillers);
    }
    Ok(KBestList {
        hypotheses: completed,
        beam_width: k,
    })
}

/// Ancestral sampling from the per-step distributions, deterministic for a
/// given seed.
pub fn sample_sequence(
    params: &ModelParams,
    src: &[u32],
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut session = DecodeSession::new(params);
    let (enc, mut state) = encode_single(&mut session, src)?;
    let max_len = cfg.effective_max_len(src.len());
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut prev = BOS_ID;
    for _ in 0..max_len {
        let (logp, _, next) = session.step(&enc, &state, &[prev])?;
        let row = logp.row(0);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut tok = row.len() - 1;
        for (v, &lp) in row.iter().enumerate() {
            cum += lp.exp();
            if u < cum {
                tok = v;
                break;
            }
        }
        tokens.push(tok as u32);
        logprob += row[tok];
        if tok as u32 == EOS_ID {
            return Ok(Hypothesis {
                tokens,
                logprob,
                alive: false,
            });
        }
        prev = tok as u32;
        state = next;
    }
    Ok(Hypothesis {
        tokens,
        logprob,
        alive: true,
    })
}

/// Weights proportional to exp(logprob), normalized over the list.
/// Computed against the maximum so widely spread scores stay stable.
pub fn renormalize_kbest(kbest: &KBestList) -> Result<Vec<f64>> {
    if kbest.hypotheses.is_empty() {
        return Err(Error::Validation("cannot renormalize an empty K-best list".into()));
    }
    let max = kbest
        .hypotheses
        .iter()
        .map(|h| h.logprob)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = kbest
        .hypotheses
        .iter()
        .map(|h| (h.logprob - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Decodes every source sentence in parallel, results in input order.
pub fn greedy_decode_corpus(
    params: &ModelParams,
    srcs: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    srcs.par_iter()
        .map(|src| greedy_decode(params, src, cfg))
        .collect()
}

pub fn beam_search_corpus(
    params: &ModelParams,
    srcs: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<KBestList>> {
    srcs.par_iter()
        .map(|src| beam_search(params, src, cfg))
        .collect()
}

/// Mean probability the model assigns to its own greedy output.
pub fn mode_mass(params: &ModelParams, corpus: &ParallelCorpus, cfg: &DecodeConfig) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Validation("mode mass of an empty corpus".into()));
    }
    let srcs: Vec<Vec<u32>> = corpus.sources().map(|s| s.to_vec()).collect();
    let hyps = greedy_decode_corpus(params, &srcs, cfg)?;
    Ok(hyps.iter().map(|h| h.logprob.exp()).sum::<f64>() / hyps.len() as f64)
}

/// Translates raw sources into content-token rows plus hypothesis
/// log-probabilities: greedy for beam 1, best beam hypothesis otherwise.
pub fn translate_corpus(
    params: &ModelParams,
    srcs: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<(Vec<u32>, f64)>> {
    let out = if cfg.beam == 1 {
        greedy_decode_corpus(params, srcs, cfg)?
            .into_iter()
            .map(|h| (h.content_tokens().to_vec(), h.logprob))
            .collect()
    } else {
        beam_search_corpus(params, srcs, cfg)?
            .into_iter()
            .map(|list| {
                let h = list.best();
                (h.content_tokens().to_vec(), h.logprob)
            })
            .collect()
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ParallelCorpus;
    use crate::model::{init_params, init_params_with_range, sequence_logprob, ModelConfig};
    use crate::testutil::{chain_model, chain_walk};

    fn micro_cfg(seed: u64) -> (ModelConfig, crate::model::ModelParams) {
        let cfg = ModelConfig::new(1, 3, 6, 6).with_dropout(0.0);
        let params = init_params(&cfg, seed).unwrap();
        (cfg, params)
    }

    #[test]
    fn greedy_follows_deterministic_chain() {
        let next = [0u32, 1, 4, 0, 5, 3];
        let params = chain_model(6, &next);
        let hyp = greedy_decode(&params, &[4, 5], &DecodeConfig::default()).unwrap();
        assert_eq!(hyp.tokens, chain_walk(&next, 50));
        assert!(hyp.is_finished());
        assert!(hyp.logprob <= 0.0 && hyp.logprob > -1e-9);
    }

    #[test]
    fn greedy_equals_beam_one() {
        for seed in 0..8 {
            let (_, params) = micro_cfg(seed);
            let cfg = DecodeConfig::default().with_beam(1);
            let greedy = greedy_decode(&params, &[4, 5, 4], &cfg).unwrap();
            let beam = beam_search(&params, &[4, 5, 4], &cfg).unwrap();
            assert_eq!(beam.hypotheses[0].tokens, greedy.tokens, "seed {seed}");
            assert!((beam.hypotheses[0].logprob - greedy.logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn hypothesis_logprobs_match_rescoring() {
        for seed in 0..5 {
            let (_, params) = micro_cfg(seed);
            let cfg = DecodeConfig {
                beam: 4,
                max_len: 6,
                length_cap_ratio: 100.0,
            };
            let src = [5, 4];
            let greedy = greedy_decode(&params, &src, &cfg).unwrap();
            let rescored = sequence_logprob(&params, &src, &greedy.tokens).unwrap();
            assert!((greedy.logprob - rescored).abs() < 1e-9);
            for hyp in &beam_search(&params, &src, &cfg).unwrap().hypotheses {
                let rescored = sequence_logprob(&params, &src, &hyp.tokens).unwrap();
                assert!((hyp.logprob - rescored).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn beam_list_has_no_duplicates_and_is_sorted() {
        let (_, params) = micro_cfg(11);
        let cfg = DecodeConfig {
            beam: 8,
            max_len: 4,
            length_cap_ratio: 100.0,
        };
        let list = beam_search(&params, &[4, 5], &cfg).unwrap();
        assert!(list.hypotheses.len() <= 8);
        for pair in list.hypotheses.windows(2) {
            assert_ne!(pair[0].tokens, pair[1].tokens);
        }
        let finished: Vec<&Hypothesis> =
            list.hypotheses.iter().filter(|h| h.is_finished()).collect();
        for pair in finished.windows(2) {
            assert!(pair[0].logprob >= pair[1].logprob);
        }
        for h in &finished {
            assert_eq!(h.tokens.iter().filter(|&&t| t == EOS_ID).count(), 1);
            assert_eq!(*h.tokens.last().unwrap(), EOS_ID);
        }
    }

    #[test]
    fn exhaustive_micro_beam_returns_true_argmax() {
        // |V| = 4 (the specials alone), max_len = 3, beam wide enough to
        // enumerate everything: compare against brute force.
        for seed in 0..5 {
            let cfg = ModelConfig::new(1, 3, 5, 4).with_dropout(0.0);
            let params = init_params(&cfg, 400 + seed).unwrap();
            let dcfg = DecodeConfig {
                beam: 64,
                max_len: 3,
                length_cap_ratio: 100.0,
            };
            let src = [4u32];
            let list = beam_search(&params, &src, &dcfg).unwrap();

            let mut exhaustive: Vec<(Vec<u32>, f64)> = Vec::new();
            for seq in enumerate_completed(4, 3) {
                let lp = sequence_logprob(&params, &src, &seq).unwrap();
                exhaustive.push((seq, lp));
            }
            exhaustive.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
            });
            assert_eq!(list.hypotheses[0].tokens, exhaustive[0].0, "seed {seed}");
            let finished_count = list.hypotheses.iter().filter(|h| h.is_finished()).count();
            assert_eq!(finished_count, exhaustive.len());
        }
    }

    fn enumerate_completed(vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
        let mut out = vec![vec![EOS_ID]];
        let mut stems: Vec<Vec<u32>> = vec![vec![]];
        for _ in 1..max_len {
            let mut next_stems = Vec::new();
            for stem in &stems {
                for v in 0..vocab as u32 {
                    if v == EOS_ID {
                        continue;
                    }
                    let mut s = stem.clone();
                    s.push(v);
                    let mut done = s.clone();
                    done.push(EOS_ID);
                    out.push(done);
                    next_stems.push(s);
                }
            }
            stems = next_stems;
        }
        out
    }

    #[test]
    fn sampling_is_seeded_and_degenerate_on_deterministic_models() {
        let next = [0u32, 1, 4, 0, 5, 3];
        let params = chain_model(6, &next);
        let cfg = DecodeConfig::default();
        let s1 = sample_sequence(&params, &[4, 5], &cfg, 9).unwrap();
        let s2 = sample_sequence(&params, &[4, 5], &cfg, 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.tokens, chain_walk(&next, 50));

        let greedy = greedy_decode(&params, &[4, 5], &cfg).unwrap();
        assert_eq!(s1.tokens, greedy.tokens);
    }

    #[test]
    fn sampling_frequencies_match_model_distribution() {
        // Zero-weight model: every step emits softmax(out_b).
        let cfg = ModelConfig::new(1, 3, 5, 6).with_dropout(0.0);
        let mut params = init_params_with_range(&cfg, 0, 0.0).unwrap();
        params.out_b.data_mut().copy_from_slice(&[0.0, 0.3, -0.4, 1.0, 0.5, -0.6]);
        let mut probs = params.out_b.data().to_vec();
        let max = probs.iter().cloned().fold(f64::MIN, f64::max);
        let mut total = 0.0;
        for p in &mut probs {
            *p = (*p - max).exp();
            total += *p;
        }
        for p in &mut probs {
            *p /= total;
        }

        let dcfg = DecodeConfig {
            beam: 1,
            max_len: 40,
            length_cap_ratio: 100.0,
        };
        let n = 100_000;
        let mut first_counts = [0usize; 6];
        let mut eos_only = 0usize;
        for seed in 0..n {
            let s = sample_sequence(&params, &[4], &dcfg, seed as u64).unwrap();
            first_counts[s.tokens[0] as usize] += 1;
            if s.tokens == [EOS_ID] {
                eos_only += 1;
            }
        }
        for v in 0..6 {
            let freq = first_counts[v] as f64 / n as f64;
            assert!(
                (freq - probs[v]).abs() < 0.01,
                "token {v}: freq {freq} vs prob {}",
                probs[v]
            );
        }
        let eos_freq = eos_only as f64 / n as f64;
        assert!((eos_freq - probs[EOS_ID as usize]).abs() < 0.01);
    }

    #[test]
    fn renormalize_matches_hand_ratios() {
        let list = KBestList {
            hypotheses: vec![
                Hypothesis {
                    tokens: vec![4, EOS_ID],
                    logprob: 0.2_f64.ln(),
                    alive: false,
                },
                Hypothesis {
                    tokens: vec![5, EOS_ID],
                    logprob: 0.1_f64.ln(),
                    alive: false,
                },
            ],
            beam_width: 2,
        };
        let w = renormalize_kbest(&list).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);

        // Shifting all log-probabilities leaves the weights unchanged.
        let mut shifted = list.clone();
        for h in &mut shifted.hypotheses {
            h.logprob -= 500.0;
        }
        let w2 = renormalize_kbest(&shifted).unwrap();
        assert!((w[0] - w2[0]).abs() < 1e-12);

        let single = KBestList {
            hypotheses: vec![shifted.hypotheses[0].clone()],
            beam_width: 1,
        };
        assert_eq!(renormalize_kbest(&single).unwrap(), vec![1.0]);

        let empty = KBestList {
            hypotheses: vec![],
            beam_width: 1,
        };
        assert!(renormalize_kbest(&empty).is_err());
    }

    #[test]
    fn mode_mass_near_one_for_deterministic_model() {
        let next = [0u32, 1, 4, 0, 5, 3];
        let params = chain_model(6, &next);
        let corpus =
            ParallelCorpus::new(vec![(vec![4, 5], vec![4]), (vec![5], vec![5])], 6, 6).unwrap();
        let m = mode_mass(&params, &corpus, &DecodeConfig::default()).unwrap();
        assert!((m - 1.0).abs() < 1e-9, "mode mass {m}");
    }

    #[test]
    fn mode_mass_matches_exhaustive_on_micro_model() {
        let cfg = ModelConfig::new(1, 3, 5, 4).with_dropout(0.0);
        let params = init_params(&cfg, 77).unwrap();
        let dcfg = DecodeConfig {
            beam: 1,
            max_len: 3,
            length_cap_ratio: 100.0,
        };
        let corpus = ParallelCorpus::new(vec![(vec![4], vec![1])], 5, 4).unwrap();
        let m = mode_mass(&params, &corpus, &dcfg).unwrap();
        let greedy = greedy_decode(&params, &[4], &dcfg).unwrap();
        let true_prob = sequence_logprob(&params, &[4], &greedy.tokens).unwrap().exp();
        assert!((m - true_prob).abs() < 1e-9);
    }

    #[test]
    fn corpus_decoding_preserves_input_order() {
        let (_, params) = micro_cfg(5);
        let srcs: Vec<Vec<u32>> = vec![vec![4], vec![5, 4], vec![4, 4, 5]];
        let cfg = DecodeConfig::default();
        let par = greedy_decode_corpus(&params, &srcs, &cfg).unwrap();
        for (i, src) in srcs.iter().enumerate() {
            let seq = greedy_decode(&params, src, &cfg).unwrap();
            assert_eq!(par[i], seq);
        }
    }
}

