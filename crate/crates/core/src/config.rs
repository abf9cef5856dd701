//! Run configuration: sectioned `key = value` text with dotted keys.
//!
//! ```text
//! seed = 7
//! [train]
//! total_steps = 2000
//! masking.word_p = 0.15
//! ```
//!
//! Keys inside a section are prefixed with the section name, so the last
//! line above is `train.masking.word_p`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("missing required key {0:?}")]
    Missing(String),
    #[error("key {key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|p| {
            !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |reason: &str| ConfigError::Syntax {
                line: i + 1,
                reason: reason.to_string(),
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
                if !name.is_empty() && !valid_key(name) {
                    return Err(err("bad section name"));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let k = k.trim();
            if !valid_key(k) {
                return Err(err("bad key"));
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if cfg.values.contains_key(&key) {
                return Err(err(&format!("duplicate key {key}")));
            }
            cfg.values.insert(key, v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn from_map(values: BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = values.keys().find(|k| !valid_key(k)) {
            return Err(ConfigError::Invalid(format!("bad key {k:?}")));
        }
        Ok(RunConfig { values })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            if !valid_key(k) {
                return Err(ConfigError::Invalid(format!("bad key {k:?}")));
            }
            self.set(k, v.trim());
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Reject any key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Canonical text form; `parse(to_text())` gives back the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        let mut top = Vec::new();
        let mut grouped: Vec<(&str, &str, &str)> = Vec::new();
        for (k, v) in &self.values {
            match k.split_once('.') {
                Some((s, rest)) => grouped.push((s, rest, v)),
                None => top.push((k.as_str(), v.as_str())),
            }
        }
        for (k, v) in top {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (s, k, v) in grouped {
            if current != Some(s) {
                out.push_str(&format!("\n[{s}]\n"));
                current = Some(s);
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_prefix_keys() {
        let c = RunConfig::parse("seed = 7\n# note\n[train]\ntotal_steps = 20\nmasking.word_p=0.15\n[]\nx = 1\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.get::<usize>("train.total_steps").unwrap(), Some(20));
        assert_eq!(c.get::<f64>("train.masking.word_p").unwrap(), Some(0.15));
        assert_eq!(c.raw("x"), Some("1"));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors() {
        assert!(RunConfig::parse("novalue\n").is_err());
        assert!(RunConfig::parse("[a\n").is_err());
        assert!(RunConfig::parse("a = 1\na = 2\n").is_err());
        let c = RunConfig::parse("a = x\n").unwrap();
        assert!(matches!(c.get::<u32>("a"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.check_keys(&["b"]), Err(ConfigError::UnknownKey(_))));
        assert!(c.check_keys(&["a"]).is_ok());
        assert!(matches!(c.require::<u32>("b"), Err(ConfigError::Missing(_))));
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse("[train]\nbatch_size = 4\n").unwrap();
        c.apply_overrides(&["train.batch_size=8"]).unwrap();
        assert_eq!(c.get::<usize>("train.batch_size").unwrap(), Some(8));
        assert!(c.apply_overrides(&["oops"]).is_err());
    }
}
