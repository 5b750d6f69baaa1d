//! Flat `key = value` text format used for run configs and checkpoint echoes.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys
//! keep their first-seen order; a repeated key overrides the earlier value.

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: IndexMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            map.set(key, v.trim());
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Typed lookup; `Ok(None)` when the key is absent.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("invalid value {v:?} for key `{key}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overlays every entry of `other` onto `self`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let m = KvMap::parse("# header\nheads = 4\n\nd_model=32 # inline\nheads = 8\n").unwrap();
        assert_eq!(m.get("heads"), Some("8"));
        assert_eq!(m.get_parsed::<usize>("d_model").unwrap(), Some(32));
        assert_eq!(m.iter().next().unwrap().0, "heads");
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(KvMap::parse("heads 4").is_err());
        assert!(KvMap::parse(" = 4").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut m = KvMap::new();
        m.set("a", 1);
        m.set("b", "x y");
        assert_eq!(KvMap::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn typed_parse_errors_name_the_key() {
        let m = KvMap::parse("heads = four").unwrap();
        let err = m.get_parsed::<usize>("heads").unwrap_err().to_string();
        assert!(err.contains("heads"));
    }
}
