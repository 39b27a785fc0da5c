//! Flat `key = value` text files with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! values run to the end of the line and are trimmed.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key-value pairs; serialization is sorted by key, so the same
/// settings always produce the same bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "empty key".into(),
                });
            }
            if kv.entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses the value under `key`.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::config(format!("missing key `{key}`")))?;
        parse_value(key, raw)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose key starts with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let dotted = format!("{prefix}.");
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.entries.insert(format!("{prefix}.{k}"), v.to_string());
        }
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::config(format!("bad value `{raw}` for `{key}`: {e}")))
}

/// Types whose fields can be read and written through flat keys.
pub trait Settings {
    /// Every field, keyed by its name relative to this type.
    fn to_kv(&self) -> KeyValues;

    /// Sets one field. Unknown keys are an error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Applies every entry of `kv`.
    fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }
}
