//! Padded teacher-forcing batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::ParallelCorpus;
use crate::data::vocab::{BOS_ID, EOS_ID, PAD_ID};

/// Row-major id matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IdMat {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl IdMat {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    /// Ids of one column, as table indices.
    pub fn column(&self, c: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.ids[r * self.cols + c] as usize).collect()
    }
}

/// One padded batch. Decoder input rows start with `<s>`; decoder output
/// rows end with `</s>`; both are `<pad>`-filled past each sentence.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: IdMat,
    pub src_lens: Vec<usize>,
    pub dec_input: IdMat,
    pub dec_output: IdMat,
    /// Scored target length per row (content tokens plus `</s>`).
    pub tgt_lens: Vec<usize>,
    /// Positions of these pairs in the source corpus.
    pub pair_indices: Vec<usize>,
    /// Per-row loss weight; 1.0 unless the corpus carries weights.
    pub row_weights: Vec<f64>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src.rows
    }

    pub fn token_count(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    fn from_pairs(pairs: &[(Vec<u32>, Vec<u32>)], indices: Vec<usize>) -> Batch {
        let rows = indices.len();
        let src_cols = indices.iter().map(|&i| pairs[i].0.len()).max().unwrap();
        let tgt_cols = indices.iter().map(|&i| pairs[i].1.len()).max().unwrap() + 1;

        let mut src = vec![PAD_ID; rows * src_cols];
        let mut dec_input = vec![PAD_ID; rows * tgt_cols];
        let mut dec_output = vec![PAD_ID; rows * tgt_cols];
        let mut src_lens = Vec::with_capacity(rows);
        let mut tgt_lens = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            let (s, t) = &pairs[i];
            src[r * src_cols..r * src_cols + s.len()].copy_from_slice(s);
            src_lens.push(s.len());
            dec_input[r * tgt_cols] = BOS_ID;
            dec_input[r * tgt_cols + 1..r * tgt_cols + 1 + t.len()].copy_from_slice(t);
            dec_output[r * tgt_cols..r * tgt_cols + t.len()].copy_from_slice(t);
            dec_output[r * tgt_cols + t.len()] = EOS_ID;
            tgt_lens.push(t.len() + 1);
        }
        Batch {
            src: IdMat { rows, cols: src_cols, ids: src },
            src_lens,
            dec_input: IdMat { rows, cols: tgt_cols, ids: dec_input },
            dec_output: IdMat { rows, cols: tgt_cols, ids: dec_output },
            tgt_lens,
            row_weights: vec![1.0; indices.len()],
            pair_indices: indices,
        }
    }
}

/// Splits a corpus into padded batches. Every pair appears exactly once.
/// With `sort_by_length` the pairs are stably ordered by source length
/// first (less padding per batch); with a shuffle seed the batch order is
/// permuted deterministically.
pub fn batch_iterator(
    corpus: &ParallelCorpus,
    batch_size: usize,
    sort_by_length: bool,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    batch_iterator_weighted(corpus, None, batch_size, sort_by_length, shuffle_seed)
}

/// `batch_iterator` with optional per-pair loss weights (aligned to the
/// corpus), used when training on renormalized K-best data.
pub fn batch_iterator_weighted(
    corpus: &ParallelCorpus,
    weights: Option<&[f64]>,
    batch_size: usize,
    sort_by_length: bool,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    if let Some(w) = weights {
        assert_eq!(w.len(), corpus.len(), "one weight per corpus pair");
    }
    let pairs = corpus.pairs();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if sort_by_length {
        order.sort_by_key(|&i| pairs[i].0.len());
    }
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = Batch::from_pairs(pairs, chunk.to_vec());
            if let Some(w) = weights {
                batch.row_weights = batch.pair_indices.iter().map(|&i| w[i]).collect();
            }
            batch
        })
        .collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..batches.len()).rev() {
            let j = rng.gen_range(0..=i);
            batches.swap(i, j);
        }
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::ParallelCorpus;

    fn corpus(n: usize) -> ParallelCorpus {
        let pairs = (0..n)
            .map(|i| {
                let len = 1 + i % 3;
                (vec![4 + i as u32; len], vec![5; 2])
            })
            .collect();
        ParallelCorpus::new(pairs, 64, 64).unwrap()
    }

    #[test]
    fn partitions_into_expected_sizes() {
        let batches = batch_iterator(&corpus(5), 2, false, None);
        let sizes: Vec<usize> = batches.iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn shift_by_one_contract() {
        let pairs = vec![(vec![4], vec![6, 7])];
        let c = ParallelCorpus::new(pairs, 8, 8).unwrap();
        let batch = &batch_iterator(&c, 1, false, None)[0];
        assert_eq!(batch.dec_input.row(0), &[BOS_ID, 6, 7]);
        assert_eq!(batch.dec_output.row(0), &[6, 7, EOS_ID]);
        assert_eq!(batch.tgt_lens, vec![3]);
    }

    #[test]
    fn padding_fills_with_pad_id() {
        let pairs = vec![(vec![4, 5, 6], vec![6]), (vec![4], vec![6, 7, 6])];
        let c = ParallelCorpus::new(pairs, 8, 8).unwrap();
        let batch = &batch_iterator(&c, 2, false, None)[0];
        assert_eq!(batch.src.row(1), &[4, PAD_ID, PAD_ID]);
        assert_eq!(batch.dec_output.row(0), &[6, EOS_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn deterministic_given_seed() {
        let c = corpus(17);
        let a = batch_iterator(&c, 4, true, Some(3));
        let b = batch_iterator(&c, 4, true, Some(3));
        let order = |bs: &[Batch]| -> Vec<Vec<usize>> {
            bs.iter().map(|b| b.pair_indices.clone()).collect()
        };
        assert_eq!(order(&a), order(&b));
    }

    #[test]
    fn every_pair_appears_exactly_once() {
        let c = corpus(23);
        for (sort, seed) in [(false, None), (true, Some(9))] {
            let batches = batch_iterator(&c, 4, sort, seed);
            let mut seen: Vec<usize> =
                batches.iter().flat_map(|b| b.pair_indices.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..23).collect::<Vec<_>>());
        }
    }
}
