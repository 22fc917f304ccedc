//! Flat `key=value` text files: UTF-8, one entry per line, `#` starts a
//! comment, blank lines ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{config, Result};

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), no + 1)).is_some() {
                return Err(config(format!("line {}: duplicate key {key:?}", no + 1)));
            }
        }
        Ok(KvFile { entries })
    }

    /// Fails on the first key not in `known` (prefix matches allowed for
    /// entries ending in `.`).
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (key, (_, line)) in &self.entries {
            let ok = known.iter().any(|k| k == key || (k.ends_with('.') && key.starts_with(k)));
            if !ok {
                return Err(config(format!("line {line}: unknown key {key:?}")));
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, (v, _))| (k.as_str(), v.as_str()))
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| config(format!("line {line}: invalid value {v:?} for key {key:?}: {e}"))),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = KvFile::parse("# header\n\nepochs = 3 # trailing\nname=abc\n").unwrap();
        assert_eq!(kv.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(kv.raw("name"), Some("abc"));
        assert!(kv.reject_unknown(&["epochs", "name"]).is_ok());
        let err = kv.reject_unknown(&["epochs"]).unwrap_err();
        assert!(err.to_string().contains("\"name\""));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvFile::parse("just text").is_err());
        assert!(KvFile::parse("a=1\na=2").is_err());
        let kv = KvFile::parse("a=x").unwrap();
        assert!(kv.get::<f64>("a").is_err());
    }
}
