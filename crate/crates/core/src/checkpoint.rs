//! Versioned text checkpoints: a header of `key value` lines followed by
//! named flat arrays, one number per line.
//!
//! ```text
//! rafa-checkpoint 1
//! kind score
//! sizes 42,128,128,16
//! array params 23664
//! 0.0123
//! ...
//! ```

use crate::nn::{Activation, Mlp};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "rafa-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("expected a `{expected}` checkpoint, found `{found}`")]
    Kind { expected: String, found: String },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    header: Vec<(String, String)>,
    arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint { kind: kind.to_string(), ..Default::default() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        assert!(!key.contains(char::is_whitespace) && !value.contains('\n'));
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
        self
    }

    pub fn set_array(&mut self, name: &str, values: &[f64]) -> &mut Self {
        match self.arrays.iter_mut().find(|(k, _)| k == name) {
            Some(e) => e.1 = values.to_vec(),
            None => self.arrays.push((name.to_string(), values.to_vec())),
        }
        self
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self.get(key)?;
        v.parse().map_err(|_| CheckpointError::Invalid { key: key.to_string(), reason: format!("cannot parse `{v}`") })
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CheckpointError> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CheckpointError::Invalid { key: key.to_string(), reason: format!("cannot parse `{s}`") })
            })
            .collect()
    }

    pub fn array(&self, name: &str) -> Result<&[f64], CheckpointError> {
        self.arrays
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| CheckpointError::Missing(format!("array {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind { expected: kind.to_string(), found: self.kind.clone() })
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.header {
            let _ = writeln!(s, "{k} {v}");
        }
        for (name, values) in &self.arrays {
            let _ = writeln!(s, "array {name} {}", values.len());
            for v in values {
                let _ = writeln!(s, "{v}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, reason: &str| CheckpointError::Format { line: line + 1, reason: reason.to_string() };
        let (i, first) = lines.next().ok_or_else(|| bad(0, "empty checkpoint"))?;
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|r| r.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(i, "not a checkpoint file"))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut ck = Checkpoint::default();
        while let Some((i, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once(' ').unwrap_or((line, ""));
            if key == "kind" {
                ck.kind = value.to_string();
            } else if key == "array" {
                let (name, len) = value.split_once(' ').ok_or_else(|| bad(i, "expected `array <name> <len>`"))?;
                let len: usize = len.trim().parse().map_err(|_| bad(i, "array length"))?;
                let mut values = Vec::with_capacity(len);
                for _ in 0..len {
                    let (j, v) = lines.next().ok_or_else(|| bad(i, "array truncated"))?;
                    values.push(v.trim().parse::<f64>().map_err(|_| bad(j, "not a number"))?);
                }
                ck.arrays.push((name.to_string(), values));
            } else {
                ck.header.push((key.to_string(), value.to_string()));
            }
        }
        if ck.kind.is_empty() {
            return Err(CheckpointError::Missing("kind".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Store a network under `prefix` (shape keys plus a parameter array).
    pub fn put_mlp(&mut self, prefix: &str, net: &Mlp) -> &mut Self {
        let sizes: Vec<String> = net.sizes().iter().map(|s| s.to_string()).collect();
        self.set(&format!("{prefix}.sizes"), sizes.join(","));
        self.set(&format!("{prefix}.activation"), net.activation().name());
        self.set(&format!("{prefix}.skip"), net.has_skip());
        self.set_array(&format!("{prefix}.params"), net.params())
    }

    pub fn take_mlp(&self, prefix: &str) -> Result<Mlp, CheckpointError> {
        let sizes: Vec<usize> = self.list(&format!("{prefix}.sizes"))?;
        let act_key = format!("{prefix}.activation");
        let act = Activation::parse(self.get(&act_key)?)
            .ok_or_else(|| CheckpointError::Invalid { key: act_key, reason: "unknown activation".into() })?;
        let skip: bool = self.parse(&format!("{prefix}.skip"))?;
        if sizes.len() < 2 {
            return Err(CheckpointError::Invalid { key: format!("{prefix}.sizes"), reason: "need two or more".into() });
        }
        let params = self.array(&format!("{prefix}.params"))?.to_vec();
        Mlp::from_params(&sizes, act, skip, params)
            .map_err(|reason| CheckpointError::Invalid { key: format!("{prefix}.params"), reason })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = crate::rng::stream(0, "ck", 0);
        let net = Mlp::new(&[3, 5, 2], Activation::Silu, true, &mut rng);
        let mut ck = Checkpoint::new("test");
        ck.set("levels", 10).set_array("odd", &[0.1 + 0.2, -1e-300, f64::MAX, 1.0 / 3.0]);
        ck.put_mlp("net", &net);
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.take_mlp("net").unwrap(), net);
        assert_eq!(back.parse::<usize>("levels").unwrap(), 10);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Checkpoint::from_text("hello"), Err(CheckpointError::Format { line: 1, .. })));
        assert!(matches!(Checkpoint::from_text("rafa-checkpoint 9\nkind x\n"), Err(CheckpointError::Version(9))));
        let trunc = "rafa-checkpoint 1\nkind x\narray p 3\n1\n2\n";
        assert!(matches!(Checkpoint::from_text(trunc), Err(CheckpointError::Format { .. })));
        let ck = Checkpoint::from_text("rafa-checkpoint 1\nkind x\n").unwrap();
        assert!(matches!(ck.expect_kind("score"), Err(CheckpointError::Kind { .. })));
    }
}
