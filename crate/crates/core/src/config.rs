//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are consumed
//! by the typed loaders; anything left over at [`KeyValues::finish`] is an
//! unknown key and rejected.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: IndexMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.shift_remove(key)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}"))),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Error out on any key no loader consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.keys().cloned().collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_leftovers() {
        let mut kv = KeyValues::parse("# comment\n a = 1\nb=two \n\n").unwrap();
        assert_eq!(kv.take_parsed::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.take("b").as_deref(), Some("two"));
        kv.finish().unwrap();

        let mut kv = KeyValues::parse("a = 1\nzzz = 3").unwrap();
        kv.take("a");
        assert!(kv.finish().is_err());
    }

    #[test]
    fn rejects_malformed() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let mut kv = KeyValues::parse("n = x").unwrap();
        assert!(kv.take_parsed::<u32>("n").is_err());
    }
}
