//! Exact parameter snapshots and their on-disk form: a raw little-endian
//! `f64` payload plus a JSON manifest sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_reference_model, ModelConfig, ModelHandle};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FIMSNAP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSnapshot {
    pub architecture_digest: String,
    pub layout: Vec<ParamShape>,
    pub values: Vec<f64>,
    pub content_digest: String,
}

/// Sidecar manifest written next to each snapshot payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub architecture_digest: String,
    pub parameters: Vec<ParamShape>,
    pub content_digest: String,
    /// Enough to rebuild an empty model of the same architecture.
    pub model_config: ModelConfig,
    pub payload: String,
}

impl ModelHandle {
    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            architecture_digest: self.architecture_digest(),
            layout: self
                .params()
                .specs()
                .iter()
                .map(|s| ParamShape {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                })
                .collect(),
            values: self.params().values().to_vec(),
            content_digest: self.content_digest(),
        }
    }

    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        let ours = self.architecture_digest();
        if snap.architecture_digest != ours {
            return Err(Error::Snapshot(format!(
                "architecture mismatch: snapshot {} vs model {}",
                short(&snap.architecture_digest),
                short(&ours)
            )));
        }
        let same_layout = snap.layout.len() == self.params().specs().len()
            && snap
                .layout
                .iter()
                .zip(self.params().specs())
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same_layout || snap.values.len() != self.num_params() {
            return Err(Error::Snapshot("parameter layout mismatch".into()));
        }
        self.params_mut().set_values(snap.values.clone());
        Ok(())
    }
}

impl ModelHandle {
    /// Loads a model written by [`ParameterSnapshot::write`].
    pub fn load(manifest_path: &Path) -> Result<(ModelHandle, SnapshotManifest)> {
        let (snap, manifest) = ParameterSnapshot::read(manifest_path)?;
        let mut model = build_reference_model(&manifest.model_config)?;
        model.restore(&snap)?;
        Ok((model, manifest))
    }
}

impl ParameterSnapshot {
    /// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path, stem: &str, config: &ModelConfig) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let payload = format!("{stem}.bin");
        let mut bytes = Vec::with_capacity(16 + 8 * self.values.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(dir.join(&payload))?.write_all(&bytes)?;
        let manifest = SnapshotManifest {
            architecture_digest: self.architecture_digest.clone(),
            parameters: self.layout.clone(),
            content_digest: self.content_digest.clone(),
            model_config: config.clone(),
            payload,
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Reads a snapshot from its manifest path and verifies the content digest.
    pub fn read(manifest_path: &Path) -> Result<(ParameterSnapshot, SnapshotManifest)> {
        let manifest: SnapshotManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let bytes = fs::read(dir.join(&manifest.payload))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Snapshot(format!("{}: bad payload header", manifest.payload)));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + 8 * n {
            return Err(Error::Snapshot(format!("{}: truncated payload", manifest.payload)));
        }
        let values: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        // Rebuild to recompute the digest over the declared layout.
        let mut model = build_reference_model(&manifest.model_config)?;
        let snap = ParameterSnapshot {
            architecture_digest: manifest.architecture_digest.clone(),
            layout: manifest.parameters.clone(),
            values,
            content_digest: manifest.content_digest.clone(),
        };
        model.restore(&snap)?;
        if model.content_digest() != manifest.content_digest {
            return Err(Error::Snapshot(format!(
                "{}: content digest does not match manifest",
                manifest.payload
            )));
        }
        Ok((snap, manifest))
    }
}

pub(crate) fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}
