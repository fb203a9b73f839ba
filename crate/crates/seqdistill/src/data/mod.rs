//! Vocabularies, parallel corpora, batching, and the synthetic
//! translation task used for desk-scale experiments.

mod batch;
mod corpus;
mod toy;
mod vocab;

pub use batch::{batch_iterator, batch_iterator_weighted, Batch, IdMat};
pub use corpus::{read_corpus, write_corpus, ParallelCorpus};
pub use toy::{generate_toy_corpus, ToyCorpus, ToyTaskConfig};
pub use vocab::{build_vocab, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
