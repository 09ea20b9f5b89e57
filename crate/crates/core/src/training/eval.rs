use crate::corpus::{Conversation, ConversationBatch};
use crate::model::{sample_noise, ContextState, PhredModel};
use crate::tensor::{Graph, SeededEngine, TensorError};

const EVAL_STREAM: u64 = 0x6576_616c;

/// Summed teacher-forced cross-entropy and the number of tokens it covers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllTotals {
    pub nll: f64,
    pub tokens: usize,
}

impl NllTotals {
    pub fn perplexity(&self) -> Option<f64> {
        (self.tokens > 0).then(|| (self.nll / self.tokens as f64).exp())
    }
}

fn batches(conversations: &[Conversation], batch_size: usize, max_turns: usize, max_len: usize) -> Vec<ConversationBatch> {
    let mut by_turns: std::collections::BTreeMap<usize, Vec<&Conversation>> = Default::default();
    for c in conversations.iter().filter(|c| c.turns.len() >= 2) {
        by_turns.entry(c.turns.len().min(max_turns)).or_default().push(c);
    }
    by_turns
        .values()
        .flat_map(|group| group.chunks(batch_size.max(1)).map(|chunk| ConversationBatch::from_conversations(chunk, max_turns, max_len)))
        .collect()
}

/// Teacher-forced negative log-likelihood of every response token (turns
/// 2..n of each conversation) under full softmax. With `noise` the
/// generator's own noise distribution is sampled (seeded by `seed`);
/// otherwise the noise input is zero.
pub fn teacher_forced_nll(
    model: &PhredModel,
    conversations: &[Conversation],
    batch_size: usize,
    noise: bool,
    seed: u64,
) -> Result<NllTotals, TensorError> {
    let gen = &model.generator;
    let spec = if noise { gen.noise } else { crate::config::NoiseSpec { std: 0.0, ..gen.noise } };
    let mut rng = SeededEngine::with_stream(seed, EVAL_STREAM);
    let mut totals = NllTotals::default();
    for batch in batches(conversations, batch_size, model.config.max_turns, model.config.max_len) {
        let mut g = Graph::inference(&model.store);
        let mut state = ContextState::zero(&mut g, gen, batch.batch_size());
        for i in 0..batch.turns.len() - 1 {
            state = gen.encode_turn(&mut g, &state, &batch.turns[i])?;
            let response = &batch.turns[i + 1];
            let targets = batch.turns[i].target_attrs.clone().expect("successor attributes");
            let z = sample_noise(&spec, response.batch_size(), response.width, &mut rng);
            let logits = gen.teacher_forced_logits(&mut g, &state, response, &targets, &z)?;
            for (t, &l) in logits.iter().enumerate() {
                let ce = g.cross_entropy(l, &response.column(t))?;
                for (b, &x) in g.value(ce).data().iter().enumerate() {
                    if response.mask[b * response.width + t] != 0.0 {
                        totals.nll += x as f64;
                        totals.tokens += 1;
                    }
                }
            }
        }
    }
    Ok(totals)
}

/// Fraction of gold responses whose attribute the attribute discriminator
/// ranks first, given the preceding context. `None` if the model has no
/// attribute discriminator or there is nothing to score.
pub fn attribute_accuracy(model: &PhredModel, conversations: &[Conversation], batch_size: usize) -> Result<Option<f64>, TensorError> {
    let Some(att) = &model.attribute_discriminator else { return Ok(None) };
    let gen = &model.generator;
    let (mut correct, mut total) = (0usize, 0usize);
    for batch in batches(conversations, batch_size, model.config.max_turns, model.config.max_len) {
        let mut g = Graph::inference(&model.store);
        let mut state = ContextState::zero(&mut g, gen, batch.batch_size());
        for i in 0..batch.turns.len() - 1 {
            state = gen.encode_turn(&mut g, &state, &batch.turns[i])?;
            let response = &batch.turns[i + 1];
            let targets = batch.turns[i].target_attrs.clone().expect("successor attributes");
            let dist = att.predict(&mut g, &state.hidden, response)?;
            let d = g.value(dist);
            for b in 0..response.batch_size() {
                if response.lengths[b] == 0 {
                    continue;
                }
                let row = d.row(b);
                let best = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                correct += usize::from(best == targets[b]);
                total += 1;
            }
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}
