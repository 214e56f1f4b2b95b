//! Run manifests and config hashing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cht_core::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// One per command run, written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Hex SHA-256 of `config.json`, the canonical effective config.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub versions: BTreeMap<String, String>,
    pub wall_secs: f64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}

/// Compact JSON with object keys sorted; defaults already filled in by the
/// typed round trip.
pub fn canonical_json<T: Serialize>(config: &T) -> Result<String> {
    // serde_json's Value map is ordered by key without `preserve_order`
    let v = serde_json::to_value(config)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("cht-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("cht-core".to_string(), cht_core::VERSION.to_string()),
        ("manifest".to_string(), "1".to_string()),
    ])
}
