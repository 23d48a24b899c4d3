//! Flat key=value configuration with typed extraction.
//!
//! Resolution order is defaults, then file values, then command-line flags.
//! Duplicate and unknown keys are rejected; every type error names the key
//! and the expected type.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::OpeError;
use crate::Result;

/// A merged view of config-file pairs and flag overrides.
#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    /// Parses a key=value file, rejecting duplicate keys.
    pub fn from_file(path: &Path) -> Result<Self> {
        let pairs = super::csvio::read_kv(path)?;
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if map.insert(k.clone(), v).is_some() {
                return Err(OpeError::Config(format!(
                    "duplicate key '{k}' in {}",
                    path.display()
                )));
            }
        }
        Ok(KeyValues { map })
    }

    /// Applies a flag override; flags win over file values.
    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.set(key, v.to_string());
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn take_f64(&mut self, key: &str, default: Option<f64>) -> Result<Option<f64>> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| OpeError::Config(format!("key '{key}': expected real, got '{raw}'"))),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: Option<u64>) -> Result<Option<u64>> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                OpeError::Config(format!(
                    "key '{key}': expected nonnegative integer, got '{raw}'"
                ))
            }),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(raw) => match raw.as_str() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(OpeError::Config(format!(
                    "key '{key}': expected boolean (true/false), got '{raw}'"
                ))),
            },
        }
    }

    pub fn take_string(&mut self, key: &str, default: Option<&str>) -> Option<String> {
        self.take_raw(key).or_else(|| default.map(str::to_string))
    }

    /// Comma-separated list of nonnegative integers.
    pub fn take_u64_list(&mut self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        match self.take_raw(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        OpeError::Config(format!(
                            "key '{key}': expected comma-separated integers, got '{raw}'"
                        ))
                    })
                })
                .collect(),
        }
    }

    /// Fails on any key that was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(OpeError::Config(format!("unknown key '{key}'")));
        }
        Ok(())
    }
}

/// Requires a value to be present, naming the key otherwise.
pub fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| OpeError::Config(format!("missing required key '{key}'")))
}
