use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::CorpusError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const BOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "</s>", "<s>"];

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token ("Don't!" → `don ' t !`).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_lowercase().collect());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Word vocabulary with fixed reserved entries `<pad>`=0, `<unk>`=1,
/// `</s>`=2, `<s>`=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens; frequency ties break
    /// lexicographically so the result is independent of input order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self, CorpusError> {
        if max_size <= RESERVED.len() {
            return Err(CorpusError::Invalid(format!(
                "vocabulary size {max_size} leaves no room beyond the {} reserved entries",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| !RESERVED.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(t, _)| t.to_string())).collect())
    }

    /// From an explicit token list whose first four entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(CorpusError::Invalid("vocabulary must start with <pad> <unk> </s> <s>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::Invalid(format!("invalid vocabulary entry {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of `token`, or [`UNK`] when absent.
    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> &str {
        self.tokens.get(index).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined text up to (excluding) the first `</s>`, skipping padding.
    pub fn detokenize(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.tokens)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&super::read_text(path)?)
    }
}

/// Utterance attributes (speaker identities or roles); no reserved or
/// unknown entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl AttributeVocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self, CorpusError> {
        if labels.is_empty() {
            return Err(CorpusError::Invalid("attribute vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            validate_label(l)?;
            if index.insert(l.clone(), i).is_some() {
                return Err(CorpusError::Invalid(format!("duplicate attribute label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// One label per line; line number (from zero) is the attribute index.
    /// A single trailing newline is allowed.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&super::read_text(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.labels.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: &str) -> Result<usize, CorpusError> {
        self.index.get(label).copied().ok_or_else(|| CorpusError::UnknownAttribute(label.to_string()))
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.labels)
    }
}

/// Attribute labels are single tokens.
pub(crate) fn validate_label(label: &str) -> Result<(), CorpusError> {
    if label.is_empty() {
        return Err(CorpusError::Invalid("empty attribute label".into()));
    }
    if label.chars().any(char::is_whitespace) {
        return Err(CorpusError::MultiTokenAttribute(label.to_string()));
    }
    Ok(())
}

fn fingerprint(items: &[String]) -> String {
    let mut h = Sha256::new();
    for item in items {
        h.update(item.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Don't  STOP!"), ["don", "'", "t", "stop", "!"]);
        assert!(tokenize("   \t ").is_empty());
        assert_eq!(tokenize("a<unk>b"), ["a", "<", "unk", ">", "b"]);
    }

    #[test]
    fn three_words_small_vocab() {
        let v = Vocabulary::build(["a", "b", "c", "a"], 10).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.encode("a"), 4);
        assert_eq!(v.encode("zzz"), UNK);
        assert_eq!(v.token(PAD), "<pad>");
    }

    #[test]
    fn truncation_keeps_most_frequent() {
        let v = Vocabulary::build(["x", "y", "y", "z", "z", "z"], 6).unwrap();
        assert_eq!(&v.tokens()[4..], ["z", "y"]);
        assert_eq!(v.encode("x"), UNK);
    }

    #[test]
    fn attribute_file_parsing() {
        let a = AttributeVocabulary::parse("questioner\nhelper\n").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.get("helper").unwrap(), 1);
        assert!(matches!(a.get("nobody"), Err(CorpusError::UnknownAttribute(_))));
        assert!(matches!(
            AttributeVocabulary::parse("two words\n"),
            Err(CorpusError::MultiTokenAttribute(_))
        ));
        assert!(AttributeVocabulary::parse("a\na\n").is_err());
        assert!(AttributeVocabulary::parse("").is_err());
    }

    #[test]
    fn detokenize_stops_at_eos() {
        let v = Vocabulary::build(["hi", "there"], 10).unwrap();
        let ids = [v.encode("hi"), v.encode("there"), EOS, v.encode("hi")];
        assert_eq!(v.detokenize(&ids), "hi there");
    }
}
