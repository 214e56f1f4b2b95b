//! Reproducible command wrappers around `cht-core`. Each command reads one
//! JSON config, writes its outputs plus `config.json` (the canonical
//! effective config) and `manifest.json` into the output directory.

pub mod commands;
pub mod manifest;

use std::path::{Path, PathBuf};

use cht_core::{Error, Result};
use serde::de::DeserializeOwned;

pub use manifest::{canonical_json, config_hash, RunManifest};

/// Parses `path` into `T`. Failures are config errors naming the key.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        if key == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("key `{}`: {}", key, inner))
        }
    })
}

/// Resolves `p` against the directory holding the config file.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Expands files and directories (every `*.zip` inside, sorted) and checks
/// that each entry exists. `key` names the config field for errors.
pub fn expand_inputs(base: &Path, key: &str, inputs: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let p = resolve(base, p);
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(&p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == ext))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Error::Config(format!("key `{key}[{i}]`: no .{ext} files in {}", p.display())));
            }
            out.extend(found);
        } else if p.is_file() {
            out.push(p);
        } else {
            return Err(Error::Config(format!("key `{key}[{i}]`: path does not exist: {}", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("key `{key}`: no inputs given")));
    }
    Ok(out)
}

pub fn require_path(base: &Path, key: &str, p: &Path) -> Result<PathBuf> {
    let p = resolve(base, p);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Config(format!("key `{key}`: path does not exist: {}", p.display())))
    }
}
