use std::collections::BTreeMap;

use super::{Conversation, EOS, PAD};
use crate::tensor::SeededEngine;

/// One turn position across a mini-batch of conversations.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnBatch {
    /// Row-major `batch × width` token indices, `PAD`-filled.
    pub tokens: Vec<usize>,
    pub width: usize,
    /// Stored length of each row (0 for an absent turn).
    pub lengths: Vec<usize>,
    /// Attribute `c_i` of this turn.
    pub source_attrs: Vec<usize>,
    /// Attribute `c_{i+1}` of the following turn, absent for the last turn.
    pub target_attrs: Option<Vec<usize>>,
    /// `mask[b * width + t] = 1` iff `t < lengths[b]`.
    pub mask: Vec<f32>,
}

impl TurnBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.width..b * self.width + self.lengths[b]]
    }

    /// Token at position `t` for every row.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.batch_size()).map(|b| self.tokens[b * self.width + t]).collect()
    }

    pub fn mask_column(&self, t: usize) -> Vec<f32> {
        (0..self.batch_size()).map(|b| self.mask[b * self.width + t]).collect()
    }

    /// Per-position row masks, `masks[t][b]`.
    pub fn mask_columns(&self) -> Vec<Vec<f32>> {
        (0..self.width).map(|t| self.mask_column(t)).collect()
    }

    /// 1 for rows whose turn is present.
    pub fn present(&self) -> Vec<f32> {
        self.lengths.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect()
    }

    /// Builds a batch from explicit rows (already terminated by `EOS`).
    pub fn from_rows(rows: &[Vec<usize>], source_attrs: Vec<usize>, target_attrs: Option<Vec<usize>>) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut tokens = vec![PAD; rows.len() * width];
        let mut mask = vec![0.0; rows.len() * width];
        for (b, row) in rows.iter().enumerate() {
            tokens[b * width..b * width + row.len()].copy_from_slice(row);
            mask[b * width..b * width + row.len()].fill(1.0);
        }
        Self { tokens, width, lengths: rows.iter().map(Vec::len).collect(), source_attrs, target_attrs, mask }
    }
}

/// A mini-batch of conversations sharing a turn count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationBatch {
    pub ids: Vec<String>,
    pub turns: Vec<TurnBatch>,
}

impl ConversationBatch {
    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    /// Builds a batch from conversations, truncating each to `max_turns`
    /// turns and each turn to `max_len - 1` tokens plus `EOS`. Conversations
    /// with fewer turns than the longest get empty, fully masked turns.
    pub fn from_conversations(convs: &[&Conversation], max_turns: usize, max_len: usize) -> Self {
        assert!(max_len >= 2, "max_len must leave room for one token and EOS");
        let n_turns = convs.iter().map(|c| c.turns.len().min(max_turns)).max().unwrap_or(0);
        let rows_for = |i: usize| -> Vec<Vec<usize>> {
            convs
                .iter()
                .map(|c| match c.turns.get(i) {
                    Some(t) if i < max_turns => {
                        let mut row: Vec<usize> = t.tokens.iter().copied().take(max_len - 1).collect();
                        row.push(EOS);
                        row
                    }
                    _ => Vec::new(),
                })
                .collect()
        };
        let attrs_for = |i: usize| -> Vec<usize> {
            convs.iter().map(|c| c.turns.get(i).filter(|_| i < max_turns).map_or(0, |t| t.attribute)).collect()
        };
        let turns = (0..n_turns)
            .map(|i| {
                let target = (i + 1 < n_turns).then(|| attrs_for(i + 1));
                TurnBatch::from_rows(&rows_for(i), attrs_for(i), target)
            })
            .collect();
        Self { ids: convs.iter().map(|c| c.id.clone()).collect(), turns }
    }
}

/// Deterministic mini-batches for one epoch: conversations are shuffled
/// with a stream keyed by `(seed, epoch)`, bucketed by (truncated) turn
/// count, chunked, and the chunks shuffled again.
pub fn make_batches(
    convs: &[Conversation],
    batch_size: usize,
    max_turns: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> Vec<ConversationBatch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = SeededEngine::with_stream(seed, 0x6261_7463_6800_0000 ^ epoch);
    let mut order: Vec<usize> = (0..convs.len()).collect();
    rng.shuffle(&mut order);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        buckets.entry(convs[i].turns.len().min(max_turns)).or_default().push(i);
    }
    let mut batches: Vec<ConversationBatch> = buckets
        .values()
        .flat_map(|idx| idx.chunks(batch_size))
        .map(|chunk| {
            let members: Vec<&Conversation> = chunk.iter().map(|&i| &convs[i]).collect();
            ConversationBatch::from_conversations(&members, max_turns, max_len)
        })
        .collect();
    rng.shuffle(&mut batches);
    batches
}

#[cfg(test)]
mod tests {
    use super::super::Turn;
    use super::*;

    fn conv(id: &str, lens: &[usize]) -> Conversation {
        Conversation {
            id: id.into(),
            turns: lens
                .iter()
                .enumerate()
                .map(|(i, &l)| Turn { attribute: i % 2, tokens: (0..l).map(|k| 4 + k).collect() })
                .collect(),
        }
    }

    #[test]
    fn single_conversation_masks() {
        let c = conv("a", &[3, 5]);
        let batches = make_batches(std::slice::from_ref(&c), 1, 5, 20, 0, 0);
        assert_eq!(batches.len(), 1);
        let t0 = &batches[0].turns[0];
        assert_eq!(t0.lengths, [4]);
        assert_eq!(t0.mask, [1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t0.row(0), [4, 5, 6, EOS]);
        assert_eq!(t0.target_attrs.as_deref(), Some(&[1][..]));
        assert_eq!(batches[0].turns[1].target_attrs, None);
    }

    #[test]
    fn truncation_puts_eos_last() {
        let c = conv("a", &[12, 2]);
        let b = ConversationBatch::from_conversations(&[&c], 5, 8);
        assert_eq!(b.turns[0].lengths, [8]);
        assert_eq!(b.turns[0].row(0)[7], EOS);
    }

    #[test]
    fn same_seed_same_batches() {
        let convs: Vec<Conversation> = (0..23).map(|i| conv(&format!("c{i}"), &[2 + i % 3, 3, 1 + i % 4][..2 + i % 2])).collect();
        let a = make_batches(&convs, 4, 5, 10, 9, 3);
        let b = make_batches(&convs, 4, 5, 10, 9, 3);
        let c = make_batches(&convs, 4, 5, 10, 9, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.iter().map(|x| x.batch_size()).sum::<usize>(), 23);
    }

    #[test]
    fn shorter_conversations_get_masked_turns() {
        let (a, b) = (conv("a", &[2, 2, 2]), conv("b", &[1, 1]));
        let batch = ConversationBatch::from_conversations(&[&a, &b], 5, 10);
        assert_eq!(batch.turns.len(), 3);
        assert_eq!(batch.turns[2].lengths, [3, 0]);
        assert_eq!(batch.turns[2].present(), [1.0, 0.0]);
        assert!(batch.turns[2].mask[batch.turns[2].width..].iter().all(|&m| m == 0.0));
    }
}
