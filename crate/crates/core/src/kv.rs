//! Plain-text `key = value` configuration files.
//!
//! One entry per line; blank lines and lines starting with `#` are
//! ignored. Keys use `[A-Za-z0-9_.-]`, values run to the end of the line
//! with surrounding whitespace trimmed. Duplicate keys are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
    lines: Vec<usize>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = KvFile::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |message: String| Error::Line { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(fail(format!("invalid key {key:?}")));
            }
            if value.is_empty() {
                return Err(fail(format!("key {key:?} has no value")));
            }
            if !seen.insert(key.to_string()) {
                return Err(fail(format!("duplicate key {key:?}")));
            }
            out.entries.push((key.to_string(), value.to_string()));
            out.lines.push(i + 1);
        }
        Ok(out)
    }

    /// Append an entry; the value must fit on one line.
    pub fn push(&mut self, key: &str, value: impl Display) -> Result<()> {
        let value = value.to_string();
        if !valid_key(key) {
            return Err(Error::Config(format!("invalid key {key:?}")));
        }
        if value.trim() != value || value.is_empty() || value.contains(['\n', '\r']) {
            return Err(Error::Config(format!("value for {key:?} cannot be stored on one line")));
        }
        if self.entries.iter().any(|(k, _)| k == key) {
            return Err(Error::Config(format!("duplicate key {key:?}")));
        }
        self.entries.push((key.to_string(), value));
        self.lines.push(0);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader {
            file: self,
            used: BTreeSet::new(),
        }
    }
}

impl std::fmt::Display for KvFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Typed access that remembers which keys were consumed, so leftovers can
/// be reported as unknown.
pub struct KvReader<'a> {
    file: &'a KvFile,
    used: BTreeSet<String>,
}

impl KvReader<'_> {
    fn locate(&self, key: &str) -> Option<(usize, &str)> {
        self.file
            .entries
            .iter()
            .position(|(k, _)| k == key)
            .map(|i| (self.file.lines[i], self.file.entries[i].1.as_str()))
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.locate(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                let message = format!("{key}: cannot parse {v:?}: {e}");
                if line > 0 {
                    Error::Line { line, message }
                } else {
                    Error::Config(message)
                }
            }),
        }
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    /// Every key under `prefix.`, consumed.
    pub fn section(&mut self, prefix: &str) -> BTreeMap<String, String> {
        let dotted = format!("{prefix}.");
        let found: BTreeMap<String, String> = self
            .file
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        for k in found.keys() {
            self.used.insert(format!("{dotted}{k}"));
        }
        found
    }

    /// Fail on any key that was never asked for.
    pub fn finish(self) -> Result<()> {
        for (i, (k, _)) in self.file.entries.iter().enumerate() {
            if !self.used.contains(k) {
                let message = format!("unknown key {k:?}");
                return Err(match self.file.lines[i] {
                    0 => Error::Config(message),
                    line => Error::Line { line, message },
                });
            }
        }
        Ok(())
    }
}
