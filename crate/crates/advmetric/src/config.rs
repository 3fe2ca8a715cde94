//! Flat `key = value` run configuration with `[loss]`, `[attack]`, and
//! `[trainer]` sections. Unknown sections or keys are hard errors so a
//! typoed hyperparameter can never silently fall back to a default.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::hex;
use crate::trainer::TrainConfig;

/// Parse a configuration file into a [`TrainConfig`], starting from
/// defaults; only listed keys are overridden.
pub fn parse_file(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_str(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if !matches!(section.as_str(), "loss" | "attack" | "trainer") {
                return Err(Error::Config(format!(
                    "line {}: unknown section [{section}]",
                    lineno + 1
                )));
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        apply(&mut cfg, &section, key, value).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
            other => other,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply(cfg: &mut TrainConfig, section: &str, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
    }
    match (section, key) {
        ("trainer", "kind") => cfg.kind = value.parse()?,
        ("trainer", "epochs") => cfg.epochs = num(key, value)?,
        ("trainer", "batch_size") => cfg.batch_size = num(key, value)?,
        ("trainer", "learning_rate") => cfg.learning_rate = num(key, value)?,
        ("trainer", "momentum") => cfg.momentum = num(key, value)?,
        ("trainer", "seeds") => {
            cfg.seeds = value
                .split(',')
                .map(|s| num("seeds", s.trim()))
                .collect::<Result<_>>()?
        }
        ("loss", "lambda1") => cfg.loss.lambda1 = num(key, value)?,
        ("loss", "lambda2") => cfg.loss.lambda2 = num(key, value)?,
        ("loss", "lambda3") => cfg.loss.lambda3 = num(key, value)?,
        ("loss", "margin") => cfg.loss.margin = num(key, value)?,
        ("loss", "eps_div") => cfg.loss.eps_div = num(key, value)?,
        ("attack", "sensitivity_eps") => cfg.sensitivity.epsilon = num(key, value)?,
        ("attack", "invariance_eps") => cfg.invariance.epsilon = num(key, value)?,
        ("attack", "oracle_k") => {
            let k = num(key, value)?;
            cfg.sensitivity.oracle_k = k;
            cfg.invariance.oracle_k = k;
        }
        ("attack", "oracle_tau") => {
            let tau = num(key, value)?;
            cfg.sensitivity.oracle_tau = tau;
            cfg.invariance.oracle_tau = tau;
        }
        ("", key) => {
            return Err(Error::Config(format!(
                "key '{key}' appears before any section header"
            )))
        }
        (section, key) => {
            return Err(Error::Config(format!(
                "unknown key '{key}' in section [{section}]"
            )))
        }
    }
    Ok(())
}

/// Hash of a configuration file's bytes, for run manifests.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
