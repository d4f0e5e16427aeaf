//! Resolved `key=value` settings: built-in defaults, then a config file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_defaults(defaults: &[(&str, String)]) -> Self {
        Self {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    /// Overlay a `key=value` file. Blank lines and `#` comments are skipped;
    /// keys must already be known.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown setting `{key}`"))),
        }
    }

    /// Flag override; `None` leaves the current value.
    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    /// Boolean switch that only ever turns a setting off.
    pub fn switch_off(&mut self, key: &str, off: bool) -> Result<()> {
        if off {
            self.set(key, "false")
        } else {
            Ok(())
        }
    }

    pub fn switch_on(&mut self, key: &str, on: bool) -> Result<()> {
        if on {
            self.set(key, "true")
        } else {
            Ok(())
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("setting `{key}` has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad list item `{s}` in `{key}`")))
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
