//! `key = value` run configuration. Command-line flags are applied on top
//! with [`RunConfig::set`], so they win over the file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const KEYS: &[&str] = &[
    "seed",
    "out",
    // network
    "size",
    "stem_pool",
    "depth",
    "width",
    "classes",
    "attention",
    // synth
    "synth.classes",
    "synth.subjects",
    "synth.per_subject",
    "synth.database",
    // training stage
    "manifest",
    "val_manifest",
    "preset",
    "init",
    "epochs",
    "lr",
    "batch",
    "momentum",
    "weight_decay",
    "step",
    "grad_clip",
    // evaluation
    "protocol",
    "db_a",
    "db_b",
    "pretrain_manifest",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_batch",
    "pretrain_weight_decay",
    "pretrain_grad_clip",
    // visualisation
    "checkpoint",
    "image",
];

/// A configuration or usage problem; maps to the validation exit code.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and lines starting with `#`
    /// are skipped; keys must be known and appear once.
    pub fn parse(text: &str) -> Result<Self, Invalid> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Invalid(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if cfg.values.contains_key(key) {
                return Err(Invalid(format!("config line {}: `{key}` is set twice", i + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| Invalid(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Ok(Self::parse(&text)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), Invalid> {
        if !KEYS.contains(&key) {
            return Err(Invalid(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Sets `key` when `value` is present.
    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), Invalid> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Invalid>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Invalid(format!("`{key}` = {v:?}: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, Invalid>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Path that must exist.
    pub fn existing_path(&self, key: &str) -> Result<Option<PathBuf>, Invalid> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => {
                let p = PathBuf::from(v);
                if p.exists() {
                    Ok(Some(p))
                } else {
                    Err(Invalid(format!("`{key}`: {} does not exist", p.display())))
                }
            }
        }
    }

    /// Comma-separated list of existing paths.
    pub fn existing_paths(&self, key: &str) -> Result<Vec<PathBuf>, Invalid> {
        let Some(v) = self.raw(key) else { return Ok(vec![]) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let p = PathBuf::from(s);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(Invalid(format!("`{key}`: {} does not exist", p.display())))
                }
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, Invalid> {
        self.get_or("seed", 0)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out").unwrap_or("out"))
    }
}
