//! Versioned, JSON-serializable record of one command invocation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// The command line as given, program name excluded.
    pub command: Vec<String>,
    /// SHA-256 of the canonical JSON of every input that affects results.
    pub config_digest: String,
    pub results: serde_json::Value,
    pub exit_status: i32,
}

impl RunReport {
    pub fn new<C: Serialize, R: Serialize>(
        command: Vec<String>,
        config: &C,
        results: &R,
        exit_status: i32,
    ) -> serde_json::Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command,
            config_digest: config_digest(config)?,
            results: serde_json::to_value(results)?,
            exit_status,
        })
    }
}

/// Hex SHA-256 of `config` serialized through `serde_json::Value`, which
/// sorts object keys.
pub fn config_digest<C: Serialize>(config: &C) -> serde_json::Result<String> {
    let canonical = serde_json::to_vec(&serde_json::to_value(config)?)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}
