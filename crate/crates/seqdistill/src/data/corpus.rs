//! Aligned source/target id sequences and their on-disk text form.

use std::path::Path;

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Aligned list of (source ids, target ids) pairs. Sequences hold content
/// tokens only; `<s>`/`</s>` wrapping happens at batch time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl ParallelCorpus {
    pub fn new(
        pairs: Vec<(Vec<u32>, Vec<u32>)>,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
    ) -> Result<ParallelCorpus> {
        for (i, (src, tgt)) in pairs.iter().enumerate() {
            if src.is_empty() || tgt.is_empty() {
                return Err(Error::Validation(format!(
                    "corpus pair {i}: empty source or target sequence"
                )));
            }
            if src.iter().any(|&id| id as usize >= src_vocab_size)
                || tgt.iter().any(|&id| id as usize >= tgt_vocab_size)
            {
                return Err(Error::Validation(format!(
                    "corpus pair {i}: token id out of vocabulary range"
                )));
            }
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn pairs(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.iter().map(|(s, _)| s.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.iter().map(|(_, t)| t.as_slice())
    }

    /// First `n` pairs as a new corpus.
    pub fn head(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
        }
    }
}

fn read_side(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::Corpus {
                path: path.display().to_string(),
                line: i + 1,
                msg: "empty sentence".into(),
            });
        }
        if line != line.trim() {
            return Err(Error::Corpus {
                path: path.display().to_string(),
                line: i + 1,
                msg: "leading or trailing whitespace".into(),
            });
        }
        out.push(vocab.encode_sentence(line));
    }
    Ok(out)
}

/// Reads `<prefix>.src` / `<prefix>.tgt`, encoding tokens with the given
/// vocabularies (out-of-vocabulary tokens become `<unk>`).
pub fn read_corpus(
    prefix: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<ParallelCorpus> {
    let src_path = prefix.with_extension("src");
    let tgt_path = prefix.with_extension("tgt");
    let src = read_side(&src_path, src_vocab)?;
    let tgt = read_side(&tgt_path, tgt_vocab)?;
    if src.len() != tgt.len() {
        return Err(Error::Validation(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    ParallelCorpus::new(
        src.into_iter().zip(tgt).collect(),
        src_vocab.len(),
        tgt_vocab.len(),
    )
}

/// Writes `<prefix>.src` / `<prefix>.tgt` as one space-joined sentence per
/// line. Writing then reading reproduces the id sequences exactly.
pub fn write_corpus(
    corpus: &ParallelCorpus,
    prefix: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<()> {
    let mut src_text = String::new();
    let mut tgt_text = String::new();
    for (src, tgt) in corpus.pairs() {
        src_text.push_str(&src_vocab.decode_sentence(src));
        src_text.push('\n');
        tgt_text.push_str(&tgt_vocab.decode_sentence(tgt));
        tgt_text.push('\n');
    }
    std::fs::write(prefix.with_extension("src"), src_text)?;
    std::fs::write(prefix.with_extension("tgt"), tgt_text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::UNK_ID;
    use proptest::prelude::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_content_tokens(tokens.iter().map(|s| s.to_string())).unwrap()
    }

    #[test]
    fn rejects_empty_sequences() {
        assert!(ParallelCorpus::new(vec![(vec![], vec![4])], 8, 8).is_err());
        assert!(ParallelCorpus::new(vec![(vec![4], vec![])], 8, 8).is_err());
    }

    #[test]
    fn rejects_out_of_range_ids() {
        assert!(ParallelCorpus::new(vec![(vec![9], vec![4])], 8, 8).is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let sv = vocab(&["aa", "bb", "cc"]);
        let tv = vocab(&["xx", "yy"]);
        let corpus =
            ParallelCorpus::new(vec![(vec![4, 5], vec![5]), (vec![6], vec![4, 4])], 7, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("toy");
        write_corpus(&corpus, &prefix, &sv, &tv).unwrap();
        let back = read_corpus(&prefix, &sv, &tv).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn blank_line_reports_line_number() {
        let sv = vocab(&["aa"]);
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("bad");
        std::fs::write(prefix.with_extension("src"), "aa\naa\n\naa\n").unwrap();
        std::fs::write(prefix.with_extension("tgt"), "aa\naa\naa\naa\n").unwrap();
        match read_corpus(&prefix, &sv, &sv) {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected corpus error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tokens_become_unk() {
        let sv = vocab(&["aa"]);
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("u");
        std::fs::write(prefix.with_extension("src"), "aa zz\n").unwrap();
        std::fs::write(prefix.with_extension("tgt"), "aa\n").unwrap();
        let corpus = read_corpus(&prefix, &sv, &sv).unwrap();
        assert_eq!(corpus.pairs()[0].0, vec![4, UNK_ID]);
    }

    proptest! {
        // Tokens of non-space printable characters survive the file round trip.
        #[test]
        fn token_round_trip(tokens in proptest::collection::vec("[!-~]{1,8}", 1..6)) {
            let mut uniq: Vec<String> = tokens.clone();
            uniq.sort();
            uniq.dedup();
            prop_assume!(uniq.iter().all(|t| !super::super::vocab::SPECIALS.contains(&t.as_str())));
            let v = vocab(&uniq.iter().map(|s| s.as_str()).collect::<Vec<_>>());
            let ids: Vec<u32> = tokens.iter().map(|t| v.encode(t)).collect();
            let corpus = ParallelCorpus::new(vec![(ids.clone(), ids.clone())], v.len(), v.len()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let prefix = dir.path().join("p");
            write_corpus(&corpus, &prefix, &v, &v).unwrap();
            let back = read_corpus(&prefix, &v, &v).unwrap();
            prop_assert_eq!(corpus, back);
        }
    }
}
