//! Plain-text checkpoint of named arrays.
//!
//! Format (version 1), UTF-8, one record per line:
//!
//! ```text
//! rank-policy-checkpoint 1
//! meta <key> <value>
//! array <name> <rows> <cols>
//! <rows*cols whitespace-separated values>
//! ```
//!
//! Values are written with Rust's shortest round-trip `f64` formatting, so a
//! save/load cycle is bit-exact. `meta` lines precede all arrays.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "rank-policy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    /// Appends every parameter of `store` as `<prefix>.<name>`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for p in store.iter() {
            self.arrays
                .push((format!("{prefix}.{}", p.name), p.value.clone()));
        }
    }

    /// Loads arrays named `<prefix>.*` into `store`, in order. Names and
    /// shapes must match.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let lead = format!("{prefix}.");
        let mut found = ParamStore::new();
        for (name, m) in &self.arrays {
            if let Some(rest) = name.strip_prefix(&lead) {
                found.add(rest, m.clone());
            }
        }
        if found.is_empty() {
            return Err(Error::Checkpoint(format!("no arrays under `{prefix}`")));
        }
        store.load_values(&found)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let lead = format!("{prefix}.");
        self.arrays.iter().any(|(n, _)| n.starts_with(&lead))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, m) in &self.arrays {
            let _ = writeln!(out, "array {name} {} {}", m.rows(), m.cols());
            let mut first = true;
            for x in m.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(format!("bad header `{header}`")));
        }
        let version: u32 = hp
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }

        let mut ckpt = Checkpoint::new();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad(format!("bad meta `{line}`")))?;
                    let value = parts.next().unwrap_or("");
                    ckpt.meta.insert(key.to_string(), value.to_string());
                }
                Some("array") => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != 4 {
                        return Err(bad(format!("bad array header `{line}`")));
                    }
                    let rows: usize = fields[2]
                        .parse()
                        .map_err(|_| bad(format!("bad rows in `{line}`")))?;
                    let cols: usize = fields[3]
                        .parse()
                        .map_err(|_| bad(format!("bad cols in `{line}`")))?;
                    let body = lines.next().unwrap_or("");
                    let data = body
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("array `{}`: {e}", fields[1])))?;
                    let m = Matrix::from_vec(rows, cols, data)
                        .map_err(|e| bad(format!("array `{}`: {e}", fields[1])))?;
                    ckpt.arrays.push((fields[1].to_string(), m));
                }
                _ => return Err(bad(format!("unexpected line `{line}`"))),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
