//! Dialogue corpora with per-utterance attributes.
//!
//! The on-disk dialogue format is UTF-8 JSON-lines, one conversation per
//! line:
//!
//! ```text
//! {"id": "c1", "turns": [{"speaker": "questioner", "text": "hi ..."}, ...]}
//! ```
//!
//! `speaker` may be omitted, in which case turns are labeled by position:
//! the first utterance is `questioner` and labels alternate with `helper`.
//! Alternatively the speakers can live in a separate attribute-record file
//! (see [`Format::Paired`]).

mod batch;
mod synthetic;
mod vocab;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{make_batches, ConversationBatch, TurnBatch};
pub use synthetic::{generate_synthetic_persona_corpus, SynthOptions, SyntheticCorpus, SyntheticManifest, MAX_SIGNATURE_BLOCKS};
pub use vocab::{tokenize, AttributeVocabulary, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

/// Labels used when a corpus carries no explicit speaker information.
pub const DEFAULT_ROLES: [&str; 2] = ["questioner", "helper"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown attribute label `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{0}` spans several tokens; one attribute token per utterance is supported")]
    MultiTokenAttribute(String),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn read_text(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CorpusError> {
    std::fs::write(path, text).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// One utterance: its attribute and word indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub attribute: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// A conversation as read from disk, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawConversation {
    pub id: String,
    pub turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTurn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub text: String,
}

/// Speaker list for one conversation in a paired attribute-record file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub id: String,
    pub speakers: Vec<String>,
}

/// How speakers are attached to utterances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Format {
    /// Speakers inline in the dialogue file (or positional roles when absent).
    JsonLines,
    /// Speakers in a separate JSON-lines file of [`AttributeRecord`]s keyed
    /// by conversation id.
    Paired { attributes: PathBuf },
}

/// Parses one line of the dialogue file.
pub fn parse_dialogue_line(line: &str) -> Result<RawConversation, String> {
    let conv: RawConversation = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if conv.id.is_empty() {
        return Err("empty conversation id".into());
    }
    Ok(conv)
}

pub fn parse_attribute_record(line: &str) -> Result<AttributeRecord, String> {
    serde_json::from_str(line).map_err(|e| e.to_string())
}

/// Parses a whole dialogue file; blank lines are skipped.
pub fn parse_dialogues(text: &str) -> Result<Vec<RawConversation>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_dialogue_line(l).map_err(|msg| CorpusError::Parse { line: i + 1, msg }))
        .collect()
}

pub fn write_dialogues(path: &Path, conversations: &[RawConversation]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for c in conversations {
        out.push_str(&serde_json::to_string(c).expect("serializable"));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Bookkeeping from one ingest pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestStats {
    pub conversations_read: usize,
    pub conversations_kept: usize,
    /// Ids rejected because dialogue and attribute records disagree.
    pub rejected_ids: Vec<String>,
    pub empty_turns_dropped: usize,
    /// Conversations left with fewer than two turns after dropping empty ones.
    pub short_conversations_dropped: usize,
    pub tokens: usize,
    pub oov_tokens: usize,
}

impl IngestStats {
    pub fn oov_rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.oov_tokens as f64 / self.tokens as f64
        }
    }
}

/// A tokenized conversation whose speakers are still labels.
struct Labeled {
    id: String,
    turns: Vec<(String, Vec<String>)>,
}

/// A training corpus together with the vocabularies built from it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub conversations: Vec<Conversation>,
    pub vocab: Vocabulary,
    pub attributes: AttributeVocabulary,
    pub stats: IngestStats,
}

fn load_raw(path: &Path, format: &Format, stats: &mut IngestStats) -> Result<Vec<RawConversation>, CorpusError> {
    let mut raw = parse_dialogues(&read_text(path)?)?;
    stats.conversations_read = raw.len();
    if let Format::Paired { attributes } = format {
        let text = read_text(attributes)?;
        let mut records: HashMap<String, Vec<String>> = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec = parse_attribute_record(line).map_err(|msg| CorpusError::Parse { line: i + 1, msg })?;
            records.insert(rec.id, rec.speakers);
        }
        raw.retain_mut(|conv| match records.get(&conv.id) {
            Some(speakers) if speakers.len() == conv.turns.len() => {
                for (turn, s) in conv.turns.iter_mut().zip(speakers) {
                    turn.speaker = Some(s.clone());
                }
                true
            }
            _ => {
                log::warn!("rejecting conversation {}: turn count does not match its attribute record", conv.id);
                stats.rejected_ids.push(conv.id.clone());
                false
            }
        });
    }
    Ok(raw)
}

fn label_and_tokenize(raw: Vec<RawConversation>, stats: &mut IngestStats) -> Result<Vec<Labeled>, CorpusError> {
    let mut out = Vec::with_capacity(raw.len());
    for conv in raw {
        let mut turns = Vec::with_capacity(conv.turns.len());
        for (pos, turn) in conv.turns.into_iter().enumerate() {
            let label = match turn.speaker {
                Some(s) => {
                    vocab::validate_label(&s)?;
                    s
                }
                None => DEFAULT_ROLES[pos % 2].to_string(),
            };
            let tokens = tokenize(&turn.text);
            if tokens.is_empty() {
                stats.empty_turns_dropped += 1;
                continue;
            }
            turns.push((label, tokens));
        }
        if turns.len() < 2 {
            stats.short_conversations_dropped += 1;
            continue;
        }
        out.push(Labeled { id: conv.id, turns });
    }
    Ok(out)
}

fn encode(labeled: Vec<Labeled>, vocab: &Vocabulary, attributes: &AttributeVocabulary, stats: &mut IngestStats) -> Result<Vec<Conversation>, CorpusError> {
    let mut convs = Vec::with_capacity(labeled.len());
    for conv in labeled {
        let mut turns = Vec::with_capacity(conv.turns.len());
        for (label, words) in conv.turns {
            let attribute = attributes.get(&label)?;
            let tokens: Vec<usize> = words.iter().map(|w| vocab.encode(w)).collect();
            stats.tokens += tokens.len();
            stats.oov_tokens += words.iter().filter(|w| !vocab.contains(w)).count();
            turns.push(Turn { attribute, tokens });
        }
        convs.push(Conversation { id: conv.id, turns });
    }
    stats.conversations_kept = convs.len();
    Ok(convs)
}

/// Reads a training split and builds both vocabularies from it. When
/// `attributes` is given it is used as-is and unknown speaker labels are
/// errors; otherwise labels are indexed in order of first appearance.
pub fn ingest(path: &Path, format: &Format, vocab_size: usize, attributes: Option<AttributeVocabulary>) -> Result<Corpus, CorpusError> {
    let mut stats = IngestStats::default();
    let raw = load_raw(path, format, &mut stats)?;
    let labeled = label_and_tokenize(raw, &mut stats)?;
    let vocab = Vocabulary::build(labeled.iter().flat_map(|c| c.turns.iter().flat_map(|(_, w)| w.iter().map(String::as_str))), vocab_size)?;
    let attributes = match attributes {
        Some(a) => a,
        None => {
            let mut labels: Vec<String> = Vec::new();
            for (label, _) in labeled.iter().flat_map(|c| &c.turns) {
                if !labels.contains(label) {
                    labels.push(label.clone());
                }
            }
            AttributeVocabulary::new(labels)?
        }
    };
    let conversations = encode(labeled, &vocab, &attributes, &mut stats)?;
    log::info!(
        "ingested {} conversations from {} (vocab {}, attributes {}, OOV rate {:.4})",
        conversations.len(),
        path.display(),
        vocab.len(),
        attributes.len(),
        stats.oov_rate()
    );
    Ok(Corpus { conversations, vocab, attributes, stats })
}

/// Reads an evaluation split against existing vocabularies.
pub fn ingest_with(
    path: &Path,
    format: &Format,
    vocab: &Vocabulary,
    attributes: &AttributeVocabulary,
) -> Result<(Vec<Conversation>, IngestStats), CorpusError> {
    let mut stats = IngestStats::default();
    let raw = load_raw(path, format, &mut stats)?;
    let labeled = label_and_tokenize(raw, &mut stats)?;
    let convs = encode(labeled, vocab, attributes, &mut stats)?;
    Ok((convs, stats))
}

/// Encodes already-parsed conversations against existing vocabularies.
pub fn encode_raw(
    raw: Vec<RawConversation>,
    vocab: &Vocabulary,
    attributes: &AttributeVocabulary,
) -> Result<(Vec<Conversation>, IngestStats), CorpusError> {
    let mut stats = IngestStats { conversations_read: raw.len(), ..Default::default() };
    let labeled = label_and_tokenize(raw, &mut stats)?;
    let convs = encode(labeled, vocab, attributes, &mut stats)?;
    Ok((convs, stats))
}

/// Writes encoded conversations back to the dialogue format.
pub fn to_raw(conversations: &[Conversation], vocab: &Vocabulary, attributes: &AttributeVocabulary) -> Vec<RawConversation> {
    conversations
        .iter()
        .map(|c| RawConversation {
            id: c.id.clone(),
            turns: c
                .turns
                .iter()
                .map(|t| RawTurn {
                    speaker: Some(attributes.label(t.attribute).to_string()),
                    text: t.tokens.iter().map(|&i| vocab.token(i)).collect::<Vec<_>>().join(" "),
                })
                .collect(),
        })
        .collect()
}
