//! Token/id tables with the four reserved specials at ids 0..=3.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Bidirectional token <-> id table. Ids 0..=3 are always the specials
/// `<pad>`, `<unk>`, `<s>`, `</s>`; unknown tokens encode to `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from content tokens (the specials are prepended).
    /// Duplicate or special-colliding tokens are rejected.
    pub fn from_content_tokens<I, S>(content: I) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for tok in content {
            let tok = tok.into();
            if index.contains_key(&tok) {
                return Err(Error::Validation(format!("duplicate vocabulary token {tok:?}")));
            }
            index.insert(tok.clone(), tokens.len() as u32);
            tokens.push(tok);
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token; unlisted tokens map to `<unk>`.
    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode_sentence(&self, line: &str) -> Vec<u32> {
        line.split(' ').map(|t| self.encode(t)).collect()
    }

    pub fn decode_sentence(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.token(id));
        }
        out
    }

    /// Canonical file form: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() {
            return Err(Error::Corpus {
                path: path.display().to_string(),
                line: lines.len(),
                msg: "vocabulary file shorter than the four specials".into(),
            });
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if lines[i] != *special {
                return Err(Error::Corpus {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected special {special:?}, found {:?}", lines[i]),
                });
            }
        }
        Vocabulary::from_content_tokens(lines[SPECIALS.len()..].iter().map(|s| s.to_string()))
    }
}

/// Builds a vocabulary of at most `max_size` entries (specials included)
/// from whitespace-tokenized sentences: the most frequent tokens are kept,
/// frequency ties broken lexicographically.
pub fn build_vocab<'a, I>(sentences: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    // max_size == 4 is degenerate but legal: specials only.
    if max_size < SPECIALS.len() {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} cannot hold the four specials"
        )));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut seen_any = false;
    for line in sentences {
        seen_any = true;
        for tok in line.split(' ').filter(|t| !t.is_empty()) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if !seen_any {
        return Err(Error::Validation("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size.saturating_sub(SPECIALS.len()));
    Vocabulary::from_content_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
}
