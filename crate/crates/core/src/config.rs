//! Line-based `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries
                .insert(key.to_string(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(err(format!("duplicate key {key:?}")));
            }
        }
        Ok(KeyValues {
            source: source.to_string(),
            entries,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|e| Error::Parse {
            path: self.source.clone(),
            line: *line,
            msg: format!("bad value for {key}: {e}"),
        })
    }

    /// Parses a comma-separated list.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        value
            .split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|e| Error::Parse {
                path: self.source.clone(),
                line: *line,
                msg: format!("bad list for {key}: {e}"),
            })
    }

    /// Fails on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Parse {
                    path: self.source.clone(),
                    line: *line,
                    msg: format!("unknown key {key:?}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_lists() {
        let kv = KeyValues::parse("t", "# comment\nk = 32\n\nns = 250, 1000 ,4000\nmode=gated\n").unwrap();
        assert_eq!(kv.get::<usize>("k").unwrap(), Some(32));
        assert_eq!(kv.get_list::<usize>("ns").unwrap(), Some(vec![250, 1000, 4000]));
        assert_eq!(kv.raw("mode"), Some("gated"));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn reports_line_numbers() {
        assert!(matches!(KeyValues::parse("t", "a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(KeyValues::parse("t", "a = 1\na = 2\n"), Err(Error::Parse { line: 2, .. })));
        let kv = KeyValues::parse("t", "a = x\n").unwrap();
        assert!(matches!(kv.get::<u32>("a"), Err(Error::Parse { line: 1, .. })));
        assert!(kv.reject_unknown(&["b"]).is_err());
        assert!(kv.reject_unknown(&["a"]).is_ok());
    }
}
