//! Seeded synthetic translation task.
//!
//! Source sentences are uniform random token strings. The target side is a
//! deterministic function of the source -- a seeded bijective lexicon
//! relabeling followed by reversal of each consecutive chunk -- with
//! optional "translator" noise that swaps a target token for a synonym
//! from the same class. Relabeling forces the models to learn embeddings,
//! chunk reversal forces attention-driven reordering, and synonym noise
//! makes the target distribution multimodal so distillation has something
//! real to transfer.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::ParallelCorpus;
use crate::data::vocab::{Vocabulary, SPECIALS};
use crate::error::{Error, Result};
use crate::seed::mix;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskConfig {
    /// Content tokens per side (specials excluded).
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seeds the lexicon permutation and the synonym classes, independently
    /// of the corpus seed so one "language" serves many corpora.
    pub lexicon_seed: u64,
    /// Every consecutive run of this many target tokens is reversed.
    pub chunk_size: usize,
    /// Probability that a target token is replaced by a same-class synonym.
    pub synonym_noise_rate: f64,
    /// Number of classes partitioning the target vocabulary.
    pub synonym_classes: usize,
    /// Training pairs; dev and test each get 1/20 of this (at least 1).
    pub num_sentences: usize,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            vocab_size: 120,
            min_len: 5,
            max_len: 15,
            lexicon_seed: 1,
            chunk_size: 3,
            synonym_noise_rate: 0.1,
            synonym_classes: 20,
            num_sentences: 10_000,
        }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < self.synonym_classes {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than synonym_classes {}",
                self.vocab_size, self.synonym_classes
            )));
        }
        if self.vocab_size == 0 || self.synonym_classes == 0 {
            return Err(Error::Config("vocab_size and synonym_classes must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.synonym_noise_rate) {
            return Err(Error::Config(format!(
                "synonym_noise_rate {} outside [0, 0.5]",
                self.synonym_noise_rate
            )));
        }
        if self.chunk_size < 1 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid sentence length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.num_sentences == 0 {
            return Err(Error::Config("num_sentences must be positive".into()));
        }
        Ok(())
    }

    pub fn dev_test_size(&self) -> usize {
        (self.num_sentences / 20).max(1)
    }
}

/// The deterministic part of the task: lexicon, chunking, synonym classes.
#[derive(Debug, Clone)]
pub struct ToyTask {
    cfg: ToyTaskConfig,
    /// Content index -> content index map from source to target vocabulary.
    lexicon: Vec<usize>,
    /// Class id per target content index.
    class_of: Vec<usize>,
    /// Member target content indices per class.
    class_members: Vec<Vec<usize>>,
}

impl ToyTask {
    pub fn new(cfg: ToyTaskConfig) -> Result<ToyTask> {
        cfg.validate()?;
        let n = cfg.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.lexicon_seed);
        let lexicon = shuffled(n, &mut rng);
        let class_order = shuffled(n, &mut rng);
        let mut class_of = vec![0usize; n];
        let mut class_members = vec![Vec::new(); cfg.synonym_classes];
        for (pos, &tok) in class_order.iter().enumerate() {
            let class = pos % cfg.synonym_classes;
            class_of[tok] = class;
            class_members[class].push(tok);
        }
        for members in &mut class_members {
            members.sort_unstable();
        }
        Ok(ToyTask {
            cfg,
            lexicon,
            class_of,
            class_members,
        })
    }

    pub fn config(&self) -> &ToyTaskConfig {
        &self.cfg
    }

    /// Noise-free target for a source sentence (content indices).
    pub fn clean_target(&self, src: &[usize]) -> Vec<usize> {
        let mut tgt: Vec<usize> = src.iter().map(|&s| self.lexicon[s]).collect();
        for chunk in tgt.chunks_mut(self.cfg.chunk_size) {
            chunk.reverse();
        }
        tgt
    }

    fn noisy_target(&self, src: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut tgt = self.clean_target(src);
        for tok in tgt.iter_mut() {
            if rng.gen::<f64>() < self.cfg.synonym_noise_rate {
                let members = &self.class_members[self.class_of[*tok]];
                if members.len() > 1 {
                    // Uniform over the other members: draw among the first
                    // len-1 and remap a self-hit to the last member.
                    let candidate = members[rng.gen_range(0..members.len() - 1)];
                    *tok = if candidate == *tok {
                        members[members.len() - 1]
                    } else {
                        candidate
                    };
                }
            }
        }
        tgt
    }

    /// Deterministic sentence for a global index: same (cfg, seed, index)
    /// always produces the same pair, independent of generation order.
    fn sentence(&self, seed: u64, index: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
        let len = rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.cfg.vocab_size)).collect();
        let tgt = self.noisy_target(&src, &mut rng);
        (src, tgt)
    }

    pub fn source_vocab(&self) -> Vocabulary {
        Vocabulary::from_content_tokens((0..self.cfg.vocab_size).map(|i| format!("s{i}")))
            .expect("generated tokens are distinct")
    }

    pub fn target_vocab(&self) -> Vocabulary {
        Vocabulary::from_content_tokens((0..self.cfg.vocab_size).map(|i| format!("t{i}")))
            .expect("generated tokens are distinct")
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

/// Generates disjoint train/dev/test splits of the synthetic task.
/// Deterministic given (cfg, seed); duplicate source sentences are skipped
/// so the splits never share an exact pair.
pub fn generate_toy_corpus(cfg: &ToyTaskConfig, seed: u64) -> Result<ToyCorpus> {
    let task = ToyTask::new(cfg.clone())?;
    let holdout = cfg.dev_test_size();
    let needed = cfg.num_sentences + 2 * holdout;

    let offset = SPECIALS.len() as u32;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(needed * 2);
    let mut pairs: Vec<(Vec<u32>, Vec<u32>)> = Vec::with_capacity(needed);
    let mut index = 0u64;
    while pairs.len() < needed {
        let (src, tgt) = task.sentence(seed, index);
        index += 1;
        if !seen.insert(src.clone()) {
            continue;
        }
        pairs.push((
            src.iter().map(|&i| i as u32 + offset).collect(),
            tgt.iter().map(|&i| i as u32 + offset).collect(),
        ));
    }

    let src_vocab = task.source_vocab();
    let tgt_vocab = task.target_vocab();
    let dev_start = cfg.num_sentences;
    let test_start = cfg.num_sentences + holdout;
    let corpus = |slice: &[(Vec<u32>, Vec<u32>)]| {
        ParallelCorpus::new(slice.to_vec(), src_vocab.len(), tgt_vocab.len())
    };
    Ok(ToyCorpus {
        train: corpus(&pairs[..dev_start])?,
        dev: corpus(&pairs[dev_start..test_start])?,
        test: corpus(&pairs[test_start..])?,
        src_vocab,
        tgt_vocab,
    })
}
