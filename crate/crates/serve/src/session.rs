use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: String,
    pub text: String,
}

/// A conversation with one snapshot. The transcript only grows; the model
/// sees at most its last `max_turns - 1` turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub snapshot_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub turns: Vec<TranscriptTurn>,
}

impl ChatSession {
    pub fn new(session_id: String, snapshot_id: String) -> Self {
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self { session_id, snapshot_id, created_at, turns: Vec::new() }
    }
}

/// Appends transcript turns as JSON lines to `<dir>/<session>.jsonl`.
#[derive(Debug, Clone)]
pub struct TranscriptLog {
    dir: PathBuf,
}

impl TranscriptLog {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    pub fn append(&self, session_id: &str, turns: &[TranscriptTurn]) -> std::io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(session_id))?;
        let mut buf = String::new();
        for t in turns {
            buf.push_str(&serde_json::to_string(t).expect("turn serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<TranscriptTurn>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
            .collect()
    }
}
