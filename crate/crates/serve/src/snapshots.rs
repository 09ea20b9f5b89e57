use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use phredgan::checkpoint::{parse_manifest, Snapshot};
use phredgan::config::RunConfig;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Listing entry for `GET /v1/snapshots`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    pub id: String,
    pub variant: String,
    pub step: u64,
    pub num_attributes: usize,
    pub vocab_size: usize,
    pub loaded: bool,
}

/// Snapshots found under one directory, each a subdirectory holding a
/// `manifest.json`. Loaded snapshots are shared read-only.
pub struct SnapshotRegistry {
    root: PathBuf,
    loaded: RwLock<HashMap<String, Arc<Snapshot>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl SnapshotRegistry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), loaded: RwLock::new(HashMap::new()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn list(&self) -> Result<Vec<SnapshotInfo>, ApiError> {
        let entries = std::fs::read_dir(&self.root)
            .map_err(|e| ApiError::Internal(format!("cannot read snapshot directory {}: {e}", self.root.display())))?;
        let loaded = self.loaded.read().expect("registry lock");
        let mut out = Vec::new();
        for entry in entries.flatten() {
            let id = entry.file_name().to_string_lossy().into_owned();
            if !valid_id(&id) {
                continue;
            }
            let Ok(text) = std::fs::read_to_string(entry.path().join("manifest.json")) else { continue };
            let manifest = match parse_manifest(&text) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("skipping snapshot {id}: {e}");
                    continue;
                }
            };
            let variant = RunConfig::from_json(&manifest.config.to_string())
                .map(|c| c.model.variant.to_string())
                .unwrap_or_else(|_| "unknown".into());
            out.push(SnapshotInfo {
                loaded: loaded.contains_key(&id),
                id,
                variant,
                step: manifest.step,
                num_attributes: manifest.num_attributes,
                vocab_size: manifest.vocab_size,
            });
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    /// Loads `id` if needed. Unknown or unreadable snapshots are `NotFound`.
    pub fn load(&self, id: &str) -> Result<Arc<Snapshot>, ApiError> {
        if let Some(s) = self.get(id) {
            return Ok(s);
        }
        if !valid_id(id) {
            return Err(ApiError::NotFound(format!("unknown snapshot `{id}`")));
        }
        let dir = self.root.join(id);
        if !dir.join("manifest.json").is_file() {
            return Err(ApiError::NotFound(format!("unknown snapshot `{id}`")));
        }
        let snap = Snapshot::load(&dir).map_err(|e| ApiError::NotFound(format!("snapshot `{id}` does not load: {e}")))?;
        log::info!("loaded snapshot {id} ({}, step {})", snap.model.variant(), snap.step);
        let snap = Arc::new(snap);
        self.loaded.write().expect("registry lock").entry(id.to_string()).or_insert(snap.clone());
        Ok(self.get(id).unwrap_or(snap))
    }

    /// An already loaded snapshot.
    pub fn get(&self, id: &str) -> Option<Arc<Snapshot>> {
        self.loaded.read().expect("registry lock").get(id).cloned()
    }

    /// Drops a loaded snapshot; sessions on it answer 409 until it is
    /// loaded again.
    pub fn unload(&self, id: &str) -> bool {
        self.loaded.write().expect("registry lock").remove(id).is_some()
    }
}
