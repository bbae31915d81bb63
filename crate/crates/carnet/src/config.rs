//! Plain-text run configuration: `key = value` lines with `#` comments.
//! Every subcommand declares its valid keys; an unknown key fails fast and
//! the error lists what would have been accepted.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use indexmap::IndexMap;

/// An ordered key=value map with typed, defaulting accessors.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    pairs: IndexMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap> {
        let mut pairs = IndexMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                bail!("line {}: empty key", lineno + 1);
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: duplicate key '{k}'", lineno + 1);
            }
        }
        Ok(ConfigMap { pairs })
    }

    pub fn load(path: &Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Reject any key outside `valid`, listing the accepted keys.
    pub fn check_keys(&self, valid: &[&str]) -> Result<()> {
        for k in self.pairs.keys() {
            if !valid.contains(&k.as_str()) {
                bail!("unknown config key '{k}'; valid keys: {}", valid.join(", "));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.pairs.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| anyhow!("missing required config key '{key}'"))
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .with_context(|| format!("key '{key}': '{v}' is not an unsigned integer")),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .with_context(|| format!("key '{key}': '{v}' is not an unsigned integer")),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .with_context(|| format!("key '{key}': '{v}' is not a number")),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => bail!("key '{key}': '{v}' is not a boolean (true/false)"),
        }
    }

    /// Render as the same `key = value` grammar [`parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.pairs.iter()
    }
}
