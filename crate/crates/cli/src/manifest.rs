use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use ite_conformal::util::write_atomic;

#[derive(Debug, Clone, Serialize)]
pub struct RunStatus {
    pub key: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunStatus {
    pub fn ok(key: String) -> Self {
        Self { key, status: "ok", error: None }
    }

    pub fn failed(key: String, error: String) -> Self {
        Self {
            key,
            status: "failed",
            error: Some(error),
        }
    }
}

/// Record of one command invocation. Contains no timestamps so reruns
/// reproduce it byte for byte.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub files: Vec<String>,
    pub runs: Vec<RunStatus>,
}

impl RunManifest {
    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(|r| r.status == "ok")
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&dir.join("manifest.json"), text.as_bytes()).context("writing manifest")
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
