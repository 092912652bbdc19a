//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # task
//! d = 16
//! classes = 4
//! agent.gamma = 0.99
//! ```
//!
//! Environment variables prefixed with `RAFA_` override keys: the rest of the
//! variable name is lower-cased and `__` becomes `.`, so
//! `RAFA_AGENT__GAMMA=0.9` overrides `agent.gamma`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const ENV_PREFIX: &str = "RAFA_";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}` (first set on line {first})")]
    Duplicate { line: usize, key: String, first: usize },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("{origin}: key `{key}` has invalid value `{value}`: {reason}")]
    Invalid {
        key: String,
        value: String,
        origin: String,
        reason: String,
    },
    #[error("unknown key `{key}` ({origin})")]
    Unknown { key: String, origin: String },
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
enum Origin {
    Line(usize),
    Env(String),
    Code,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(l) => write!(f, "line {l}"),
            Origin::Env(v) => write!(f, "environment variable {v}"),
            Origin::Code => write!(f, "default"),
        }
    }
}

/// Parsed flat configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, Entry>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Malformed { line, text: raw.trim().to_string() });
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Malformed { line, text: raw.trim().to_string() });
            }
            if let Some(prev) = entries.get(key) {
                let first = match prev.origin {
                    Origin::Line(l) => l,
                    _ => 0,
                };
                return Err(ConfigError::Duplicate { line, key: key.to_string(), first });
            }
            entries.insert(
                key.to_string(),
                Entry { value: v.trim().to_string(), origin: Origin::Line(line) },
            );
        }
        Ok(FlatConfig { entries })
    }

    /// Apply `RAFA_*` overrides from the given variables.
    pub fn apply_env<I, K, V>(&mut self, vars: I)
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let k = k.as_ref();
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                if rest.is_empty() {
                    continue;
                }
                let key = rest.to_ascii_lowercase().replace("__", ".");
                self.entries.insert(
                    key,
                    Entry { value: v.as_ref().trim().to_string(), origin: Origin::Env(k.to_string()) },
                );
            }
        }
    }

    /// Apply overrides from the process environment.
    pub fn apply_process_env(&mut self) {
        self.apply_env(std::env::vars());
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries
            .insert(key.to_string(), Entry { value: value.to_string(), origin: Origin::Code });
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Error for a key whose value failed to parse.
    pub fn invalid(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        let (value, origin) = match self.entries.get(key) {
            Some(e) => (e.value.clone(), e.origin.to_string()),
            None => (String::new(), Origin::Code.to_string()),
        };
        ConfigError::Invalid { key: key.to_string(), value, origin, reason: reason.into() }
    }

    pub fn require_str(&self, key: &str) -> Result<&str, ConfigError> {
        self.raw(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v = self.require_str(key)?;
        v.parse::<T>().map_err(|e| self.invalid(key, e.to_string()))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|e| self.invalid(key, e.to_string())),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<T>().map_err(|e| self.invalid(key, e.to_string())))
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    /// Reject keys outside the given prefixes / exact names.
    pub fn check_known(&self, exact: &[&str], prefixes: &[&str]) -> Result<(), ConfigError> {
        for (k, e) in &self.entries {
            let ok = exact.contains(&k.as_str()) || prefixes.iter().any(|p| k.starts_with(p));
            if !ok {
                return Err(ConfigError::Unknown { key: k.clone(), origin: e.origin.to_string() });
            }
        }
        Ok(())
    }

    /// Canonical text rendering (sorted keys), stable for hashing.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, e) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&e.value);
            s.push('\n');
        }
        s
    }
}
