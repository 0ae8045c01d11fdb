//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value pairs. Every key must be consumed by a `take_*` call;
/// [`KvConfig::finish`] reports leftovers as unknown fields.
#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    values: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line_no}"), "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {line_no}"), "empty key"));
            }
            if values.insert(key.to_string(), (value.trim().to_string(), line_no)).is_some() {
                return Err(Error::config(key, format!("set twice (again on line {line_no})")));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), (value.to_string(), 0));
    }

    /// Removes and parses `key` into `slot` when present.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((raw, _)) = self.values.remove(key) {
            *slot = raw.parse().map_err(|e: T::Err| Error::config(key, format!("cannot parse `{raw}`: {e}")))?;
        }
        Ok(())
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some((raw, _)) => raw
                .parse()
                .map(Some)
                .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{raw}`: {e}"))),
        }
    }

    /// Errors on any key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::config(key, format!("unknown setting (line {line})"))),
        }
    }
}
