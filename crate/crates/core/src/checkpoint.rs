//! Model snapshots on disk.
//!
//! A snapshot is a directory:
//!
//! ```text
//! manifest.json        config, step, vocabulary fingerprints, parameter index
//! vocab.txt            one token per line
//! attributes.txt       one attribute label per line
//! params/<name>.bin    one blob per parameter
//! ```
//!
//! A parameter blob is a 16-byte header (`b"PHREDPRM"`, rank as u32, dtype
//! tag as u32), `rank` u64 extents, then row-major f32 values. Every integer
//! and float is little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, TrainConfig};
use crate::corpus::{AttributeVocabulary, CorpusError, Vocabulary};
use crate::model::PhredModel;
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"PHREDPRM";
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed parameter blob: {0}")]
    Blob(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("snapshot does not match its model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Serializes one tensor.
pub fn encode_blob(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses one tensor blob, rejecting anything but an exact encoding.
pub fn decode_blob(bytes: &[u8]) -> Result<Tensor, CheckpointError> {
    let bad = |m: String| CheckpointError::Blob(m);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dtype = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype tag {dtype}")));
    }
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let rank = rank as usize;
    let extents_end = HEADER_LEN + 8 * rank;
    if bytes.len() < extents_end {
        return Err(bad("truncated extents".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for k in 0..rank {
        let at = HEADER_LEN + 8 * k;
        let e = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let e = usize::try_from(e).map_err(|_| bad(format!("extent {e} too large")))?;
        if e == 0 {
            return Err(bad("zero extent".into()));
        }
        count = count.checked_mul(e).ok_or_else(|| bad("element count overflows".into()))?;
        shape.push(e);
    }
    let expected = count.checked_mul(4).and_then(|n| n.checked_add(extents_end)).ok_or_else(|| bad("size overflows".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for shape {shape:?}, found {}", bytes.len())));
    }
    let data = bytes[extents_end..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(shape, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub step: u64,
    pub vocab_size: usize,
    pub num_attributes: usize,
    pub vocab_fingerprint: String,
    pub attributes_fingerprint: String,
    pub params: Vec<ParamEntry>,
}

/// A trained model together with everything needed to use it.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub model: PhredModel,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub attributes: AttributeVocabulary,
    pub step: u64,
}

impl Snapshot {
    pub fn run_config(&self) -> RunConfig {
        RunConfig { model: self.model.config.clone(), train: self.train.clone() }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.run_config().to_json(),
            step: self.step,
            vocab_size: self.model.vocab_size,
            num_attributes: self.model.num_attributes,
            vocab_fingerprint: self.vocab.fingerprint(),
            attributes_fingerprint: self.attributes.fingerprint(),
            params: self
                .model
                .store
                .iter()
                .map(|(_, name, t)| ParamEntry { name: name.to_string(), file: format!("params/{name}.bin"), shape: t.shape().to_vec() })
                .collect(),
        }
    }

    /// Writes the snapshot to `dir` atomically: everything goes to a sibling
    /// temporary directory that is renamed into place.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io(parent))?;
        let name = dir.file_name().ok_or_else(|| CheckpointError::Manifest(format!("{} has no file name", dir.display())))?;
        let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        fs::create_dir_all(tmp.join("params")).map_err(io(&tmp))?;
        let manifest = self.manifest();
        for (entry, (_, _, t)) in manifest.params.iter().zip(self.model.store.iter()) {
            let p = tmp.join(&entry.file);
            fs::write(&p, encode_blob(t)).map_err(io(&p))?;
        }
        let write = |file: &str, text: &str| -> Result<(), CheckpointError> {
            let p = tmp.join(file);
            fs::write(&p, text).map_err(io(&p))
        };
        write("vocab.txt", &self.vocab.to_text())?;
        write("attributes.txt", &self.attributes.to_text())?;
        write("manifest.json", &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        if dir.exists() {
            let old = parent.join(format!(".{}.old-{}", name.to_string_lossy(), std::process::id()));
            fs::rename(dir, &old).map_err(io(dir))?;
            fs::rename(&tmp, dir).map_err(io(dir))?;
            fs::remove_dir_all(&old).map_err(io(&old))?;
        } else {
            fs::rename(&tmp, dir).map_err(io(dir))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
        let manifest = parse_manifest(&text)?;
        let config = RunConfig::from_json(&manifest.config.to_string())?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let attributes = AttributeVocabulary::load(&dir.join("attributes.txt"))?;
        if vocab.fingerprint() != manifest.vocab_fingerprint || vocab.len() != manifest.vocab_size {
            return Err(CheckpointError::Mismatch("vocab.txt does not match the manifest fingerprint".into()));
        }
        if attributes.fingerprint() != manifest.attributes_fingerprint || attributes.len() != manifest.num_attributes {
            return Err(CheckpointError::Mismatch("attributes.txt does not match the manifest fingerprint".into()));
        }
        let mut model = PhredModel::new(&config.model, manifest.vocab_size, manifest.num_attributes, 0)?;
        if manifest.params.len() != model.store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "manifest lists {} parameters, the model has {}",
                manifest.params.len(),
                model.store.len()
            )));
        }
        for entry in &manifest.params {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter `{}`", entry.name)))?;
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(io(&path))?;
            let t = decode_blob(&bytes)?;
            if t.shape() != model.store.get(id).shape() || t.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        Ok(Self { model, train: config.train, vocab, attributes, step: manifest.step })
    }
}

/// Parses and sanity-checks `manifest.json`.
pub fn parse_manifest(text: &str) -> Result<Manifest, CheckpointError> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Manifest(format!("unsupported format version {}", m.format_version)));
    }
    for p in &m.params {
        let ok_name = !p.name.is_empty() && p.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_'));
        if !ok_name || p.file != format!("params/{}.bin", p.name) {
            return Err(CheckpointError::Manifest(format!("bad parameter entry `{}`", p.name)));
        }
    }
    Ok(m)
}
