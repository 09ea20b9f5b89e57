use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Everything needed to repeat a command, written before the work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Resolved flat configuration, when the command has one.
    pub config: Option<serde_json::Value>,
    pub seed: u64,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Remaining command arguments.
    pub arguments: BTreeMap<String, serde_json::Value>,
    pub tool_version: String,
    pub output_dir: PathBuf,
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, output_dir: &Path) -> Self {
        Self {
            command: command.into(),
            config: None,
            seed,
            inputs: BTreeMap::new(),
            arguments: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            output_dir: output_dir.to_path_buf(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        let digest = file_sha256(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(self)
    }

    pub fn argument(mut self, name: &str, value: impl Serialize) -> Self {
        self.arguments.insert(name.into(), serde_json::to_value(value).expect("argument serializes"));
        self
    }

    pub fn write(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| CliError::io(&self.output_dir, e))?;
        let path = self.output_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Checks that every recorded input still has the recorded contents.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for (path, digest) in &self.inputs {
            let now = file_sha256(Path::new(path))?;
            if &now != digest {
                return Err(CliError::Runtime(format!("{path} changed since the manifest was written")));
            }
        }
        Ok(())
    }
}
