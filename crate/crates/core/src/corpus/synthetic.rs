//! Synthetic persona corpus: each attribute owns a disjoint block of
//! signature tokens and emits one of them at every position with probability
//! `signature_rate`; otherwise a shared filler token is emitted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_dialogues, write_text, AttributeVocabulary, CorpusError, RawConversation, RawTurn};
use crate::tensor::SeededEngine;

pub const MAX_SIGNATURE_BLOCKS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub block_size: usize,
    pub fillers: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fractions of conversations written to the validation and test splits.
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            block_size: 6,
            fillers: 12,
            min_turns: 2,
            max_turns: 5,
            min_len: 3,
            max_len: 7,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Ground truth written next to a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    /// Attribute label → its signature tokens.
    pub signatures: BTreeMap<String, Vec<String>>,
    pub signature_rate: f64,
    pub seed: u64,
    pub fillers: Vec<String>,
    pub conversations: usize,
}

impl SyntheticManifest {
    /// Label owning `token`, if it is a signature token.
    pub fn owner(&self, token: &str) -> Option<&str> {
        self.signatures
            .iter()
            .find(|(_, toks)| toks.iter().any(|t| t == token))
            .map(|(label, _)| label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<RawConversation>,
    pub valid: Vec<RawConversation>,
    pub test: Vec<RawConversation>,
    pub attributes: AttributeVocabulary,
    pub manifest: SyntheticManifest,
}

fn label(k: usize) -> String {
    format!("persona{k}")
}

fn signature_token(k: usize, j: usize) -> String {
    format!("sig{k}w{j}")
}

pub fn generate_synthetic_persona_corpus(
    n_convs: usize,
    n_attrs: usize,
    signature_rate: f64,
    seed: u64,
    opts: &SynthOptions,
) -> Result<SyntheticCorpus, CorpusError> {
    if n_attrs < 2 {
        return Err(CorpusError::Invalid(format!("need at least 2 attributes, got {n_attrs}")));
    }
    if n_attrs > MAX_SIGNATURE_BLOCKS {
        return Err(CorpusError::Invalid(format!(
            "{n_attrs} attributes requested but only {MAX_SIGNATURE_BLOCKS} signature blocks exist"
        )));
    }
    if !(signature_rate > 0.0 && signature_rate <= 1.0) {
        return Err(CorpusError::Invalid(format!("signature_rate must be in (0, 1], got {signature_rate}")));
    }
    if opts.block_size == 0
        || opts.fillers == 0
        || opts.min_turns < 2
        || opts.max_turns < opts.min_turns
        || opts.min_len == 0
        || opts.max_len < opts.min_len
    {
        return Err(CorpusError::Invalid(format!("inconsistent synthetic corpus options {opts:?}")));
    }
    let fillers: Vec<String> = (0..opts.fillers).map(|j| format!("fill{j}")).collect();
    let signatures: BTreeMap<String, Vec<String>> =
        (0..n_attrs).map(|k| (label(k), (0..opts.block_size).map(|j| signature_token(k, j)).collect())).collect();
    let mut rng = SeededEngine::new(seed);
    let mut all = Vec::with_capacity(n_convs);
    for c in 0..n_convs {
        let first = rng.below(n_attrs);
        let second = (first + 1 + rng.below(n_attrs - 1)) % n_attrs;
        let n_turns = opts.min_turns + rng.below(opts.max_turns - opts.min_turns + 1);
        let turns = (0..n_turns)
            .map(|i| {
                let speaker = if i % 2 == 0 { first } else { second };
                let len = opts.min_len + rng.below(opts.max_len - opts.min_len + 1);
                let words: Vec<&str> = (0..len)
                    .map(|_| {
                        if rng.unit_f64() < signature_rate {
                            signatures[&label(speaker)][rng.below(opts.block_size)].as_str()
                        } else {
                            fillers[rng.below(opts.fillers)].as_str()
                        }
                    })
                    .collect();
                RawTurn { speaker: Some(label(speaker)), text: words.join(" ") }
            })
            .collect();
        all.push(RawConversation { id: format!("synth-{c:06}"), turns });
    }
    let n_test = (n_convs as f64 * opts.test_fraction).round() as usize;
    let n_valid = (n_convs as f64 * opts.valid_fraction).round() as usize;
    let n_train = n_convs.saturating_sub(n_test + n_valid);
    let test = all.split_off(n_train + n_valid);
    let valid = all.split_off(n_train);
    let attributes = AttributeVocabulary::new((0..n_attrs).map(label).collect())?;
    Ok(SyntheticCorpus {
        train: all,
        valid,
        test,
        attributes,
        manifest: SyntheticManifest { signatures, signature_rate, seed, fillers, conversations: n_convs },
    })
}

impl SyntheticCorpus {
    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl`, `attributes.txt`
    /// and `manifest.json` into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?;
        write_dialogues(&dir.join("train.jsonl"), &self.train)?;
        write_dialogues(&dir.join("valid.jsonl"), &self.valid)?;
        write_dialogues(&dir.join("test.jsonl"), &self.test)?;
        write_text(&dir.join("attributes.txt"), &self.attributes.to_text())?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("serializable");
        write_text(&dir.join("manifest.json"), &(manifest + "\n"))
    }

    pub fn all(&self) -> impl Iterator<Item = &RawConversation> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

impl SyntheticManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        serde_json::from_str(&super::read_text(path)?).map_err(|e| CorpusError::Parse { line: e.line(), msg: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rate_uses_only_own_block() {
        let corpus = generate_synthetic_persona_corpus(50, 2, 1.0, 3, &SynthOptions::default()).unwrap();
        for conv in corpus.all() {
            for turn in &conv.turns {
                let speaker = turn.speaker.as_deref().unwrap();
                for w in turn.text.split(' ') {
                    assert_eq!(corpus.manifest.owner(w), Some(speaker), "{w} in {speaker}");
                }
            }
        }
    }

    #[test]
    fn measured_rate_close_to_requested() {
        let opts = SynthOptions { min_turns: 2, max_turns: 2, ..SynthOptions::default() };
        let corpus = generate_synthetic_persona_corpus(5_000, 2, 0.5, 11, &opts).unwrap();
        let (mut sig, mut total) = (0usize, 0usize);
        for turn in corpus.all().flat_map(|c| &c.turns) {
            for w in turn.text.split(' ') {
                total += 1;
                sig += usize::from(corpus.manifest.owner(w).is_some());
            }
        }
        assert_eq!(corpus.all().map(|c| c.turns.len()).sum::<usize>(), 10_000);
        let rate = sig as f64 / total as f64;
        assert!((rate - 0.5).abs() <= 0.03, "{rate}");
    }

    #[test]
    fn same_seed_byte_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for dir in [&a, &b] {
            generate_synthetic_persona_corpus(40, 3, 0.7, 5, &SynthOptions::default()).unwrap().write(dir.path()).unwrap();
        }
        for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "attributes.txt", "manifest.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn argument_errors() {
        let o = SynthOptions::default();
        assert!(generate_synthetic_persona_corpus(10, 1, 0.5, 0, &o).is_err());
        assert!(generate_synthetic_persona_corpus(10, MAX_SIGNATURE_BLOCKS + 1, 0.5, 0, &o).is_err());
        assert!(generate_synthetic_persona_corpus(10, 2, 0.0, 0, &o).is_err());
        assert!(generate_synthetic_persona_corpus(10, 2, 1.5, 0, &o).is_err());
    }

    #[test]
    fn speakers_alternate() {
        let corpus = generate_synthetic_persona_corpus(30, 4, 0.8, 1, &SynthOptions::default()).unwrap();
        for conv in corpus.all() {
            for pair in conv.turns.windows(2) {
                assert_ne!(pair[0].speaker, pair[1].speaker);
            }
            if conv.turns.len() > 2 {
                assert_eq!(conv.turns[0].speaker, conv.turns[2].speaker);
            }
        }
    }
}
