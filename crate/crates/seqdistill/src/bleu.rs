//! Sentence-level smoothed BLEU (the similarity used when picking beam
//! hypotheses close to gold) and corpus-level BLEU (the evaluation metric).

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_N: usize = 4;

/// Per-order precisions and the pieces of the final score.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuBreakdown {
    /// Precisions after smoothing, orders 1..=4.
    pub precisions: [f64; MAX_N],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Geometric mean of the precisions times the brevity penalty, in [0, 1].
    pub score: f64,
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut counts: HashMap<&[u32], u64> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and total hypothesis n-gram count for one order.
fn clipped_matches(hyp: &[u32], reference: &[u32], n: usize) -> (u64, u64) {
    let total = hyp.len().saturating_sub(n - 1) as u64;
    if total == 0 {
        return (0, 0);
    }
    let ref_counts = ngram_counts(reference, n);
    let mut matched = 0;
    for (gram, count) in ngram_counts(hyp, n) {
        matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
    }
    (matched, total)
}

/// BLEU-4 for a single sentence with add-one smoothing on both the clipped
/// match count and the total count for orders >= 2. Unigram precision is
/// unsmoothed, so a hypothesis sharing no token with the reference scores 0.
/// Hypotheses shorter than `n` contribute a neutral 1/1 at that order.
pub fn smoothed_sentence_bleu(hyp: &[u32], reference: &[u32]) -> Result<BleuBreakdown> {
    if reference.is_empty() {
        return Err(Error::Validation("sentence BLEU reference must be nonempty".into()));
    }
    let mut precisions = [0.0; MAX_N];
    if hyp.is_empty() {
        return Ok(BleuBreakdown {
            precisions,
            brevity_penalty: 0.0,
            hyp_len: 0,
            ref_len: reference.len(),
            score: 0.0,
        });
    }
    for n in 1..=MAX_N {
        let (matched, total) = clipped_matches(hyp, reference, n);
        precisions[n - 1] = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).exp().min(1.0);
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64;
        bp * log_mean.exp()
    };
    Ok(BleuBreakdown {
        precisions,
        brevity_penalty: bp,
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        score,
    })
}

/// Standard corpus BLEU-4: n-gram statistics pooled over all pairs before
/// the precision quotients, no smoothing, brevity penalty from the total
/// lengths. Reported on the 0..=100 scale.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> Result<BleuBreakdown> {
    if hyps.len() != refs.len() {
        return Err(Error::Validation(format!(
            "corpus BLEU needs aligned lists, got {} hypotheses and {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::Validation("corpus BLEU references must be nonempty".into()));
    }
    let mut matched = [0u64; MAX_N];
    let mut total = [0u64; MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_N {
            let (m, t) = clipped_matches(hyp, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut precisions = [0.0; MAX_N];
    for n in 0..MAX_N {
        precisions[n] = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }
    let bp = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuBreakdown {
        precisions,
        brevity_penalty: bp,
        hyp_len,
        ref_len,
        score,
    })
}

impl BleuBreakdown {
    /// The familiar scorer output line shape.
    pub fn report_line(&self) -> String {
        let ratio = if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        };
        format!(
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}
