//! Human-readable `key = value` files.
//!
//! Blank lines and lines starting with `#` are ignored. A line of the form
//! `[name]` opens a new block; keys before the first block are global.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_owned(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::BadConfig(format!("missing key {key}")))?;
        v.parse()
            .map_err(|_| Error::BadConfig(format!("cannot parse {key} = {v}")))
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(_) => self.require(key),
        }
    }

    pub fn write_to(&self, out: &mut String) {
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
    }
}

/// A parsed file: global keys plus named blocks in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDocument {
    pub global: KeyValues,
    pub blocks: Vec<(String, KeyValues)>,
}

impl KvDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDocument::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                doc.blocks.push((name.trim().to_owned(), KeyValues::new()));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("key=value file", format!("line {}: {line:?}", no + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::format(
                    "key=value file",
                    format!("line {}: empty key", no + 1),
                ));
            }
            let target = match doc.blocks.last_mut() {
                Some((_, kv)) => kv,
                None => &mut doc.global,
            };
            if target.raw(k).is_some() {
                return Err(Error::format(
                    "key=value file",
                    format!("line {}: duplicate key {k}", no + 1),
                ));
            }
            target.set(k, v);
        }
        Ok(doc)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.global.write_to(&mut out);
        for (name, kv) in &self.blocks {
            out.push_str(&format!("\n[{name}]\n"));
            kv.write_to(&mut out);
        }
        out
    }
}
