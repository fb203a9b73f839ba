//! Flat `key = value` configuration files.
//!
//! One assignment per line; blank lines and `#` comments are ignored.
//! Consumers take values by key and then call [`KvFile::finish`], which
//! rejects any key that was never consumed, so typos fail loudly.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
    consumed: std::collections::BTreeSet<String>,
    origin: String,
}

impl KvFile {
    pub fn parse(text: &str, origin: &str) -> Result<KvFile> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{origin} line {}: expected `key = value`, found {raw:?}",
                    i + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "{origin} line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
        }
        Ok(KvFile {
            entries,
            consumed: Default::default(),
            origin: origin.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<KvFile> {
        let text = std::fs::read_to_string(path)?;
        KvFile::parse(&text, &path.display().to_string())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Raw string value, marking the key as consumed.
    pub fn get_str(&mut self, key: &str) -> Option<String> {
        let v = self.entries.get(key).cloned();
        if v.is_some() {
            self.consumed.insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!(
                    "{}: key {key:?} has unparsable value {v:?}",
                    self.origin
                ))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{}: key {key:?} must be a boolean, found {v:?}",
                    self.origin
                ))),
            },
        }
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{}: unknown keys: {}",
                self.origin,
                unknown
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_comments() {
        let mut kv = KvFile::parse("a = 3\n# comment\nb = hello # trailing\n", "test").unwrap();
        assert_eq!(kv.get::<i32>("a").unwrap(), Some(3));
        assert_eq!(kv.get_str("b").unwrap(), "hello");
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut kv = KvFile::parse("alpha = 0.5\nbogus = 1\n", "test").unwrap();
        let _ = kv.get::<f64>("alpha").unwrap();
        assert!(kv.finish().is_err());
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(KvFile::parse("just words\n", "test").is_err());
        assert!(KvFile::parse("a = 1\na = 2\n", "test").is_err());
    }
}
