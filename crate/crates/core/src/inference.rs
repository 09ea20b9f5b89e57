//! Response generation, discriminator ranking and the noise-scale search.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{NoiseSpec, Variant};
use crate::corpus::{Conversation, ConversationBatch, TurnBatch, BOS, EOS};
use crate::model::{sample_noise, ContextState, NoiseDraw, PhredModel};
use crate::tensor::{Graph, SeededEngine, TensorError};

const GENERATE_STREAM: u64 = 0x6765_6e00;
const ALPHA_STREAM: u64 = 0x616c_7068_6100;

/// The default noise-scale grid, 1 through 30.
pub fn default_alpha_grid() -> Vec<f32> {
    (1..=30).map(|a| a as f32).collect()
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("context is empty")]
    EmptyContext,
    #[error("attribute index {index} out of range for {count} attributes")]
    InvalidAttribute { index: usize, count: usize },
    #[error("token index {index} out of range for vocabulary of {count}")]
    InvalidToken { index: usize, count: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("variant {0} has no adversarial discriminator")]
    NoAdversary(Variant),
}

/// One context utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub attribute: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub context: Vec<ContextTurn>,
    /// Attribute of the responder.
    pub target: usize,
    pub num_candidates: usize,
    /// Defaults to the model's `max_len`.
    pub max_len: Option<usize>,
    /// Noise standard deviation; defaults to the model's training value.
    pub alpha: Option<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    /// Generated tokens, ending with `EOS` unless the length cap was hit.
    pub tokens: Vec<usize>,
    /// Adversarial probability of each word (empty for `phred`).
    pub word_probs: Vec<f64>,
    /// Mean per-word log probability from the adversarial discriminator.
    pub adv_score: Option<f64>,
    /// `log D_att(target | context, tokens)`, `phredgan_d` only.
    pub att_log_confidence: Option<f64>,
    /// Mean per-token generator log-likelihood of the greedy choices.
    pub generator_log_likelihood: f64,
    pub rank_score: f64,
}

/// The ranking score of a candidate.
///
/// `hredgan` and `phredgan_a` use the adversarial mean log probability.
/// `phredgan_d` averages it with the attribute log confidence divided by
/// the candidate length. `phred` has no discriminator; its score is the
/// generator log-likelihood.
pub fn rank_score(variant: Variant, adv_score: Option<f64>, att_log_confidence: Option<f64>, length: usize, generator_ll: f64) -> f64 {
    match (variant, adv_score, att_log_confidence) {
        (Variant::Phred, _, _) | (_, None, _) => generator_ll,
        (Variant::PhredganD, Some(adv), Some(att)) => 0.5 * (adv + att / length.max(1) as f64),
        (_, Some(adv), _) => adv,
    }
}

fn mean_log(probs: &[f64]) -> f64 {
    probs.iter().map(|p| p.max(crate::training::P_MIN as f64).ln()).sum::<f64>() / probs.len().max(1) as f64
}

fn check_attribute(model: &PhredModel, index: usize) -> Result<(), InferenceError> {
    if index >= model.num_attributes {
        Err(InferenceError::InvalidAttribute { index, count: model.num_attributes })
    } else {
        Ok(())
    }
}

/// Greedy decoding from `state` for every row. Returns token rows and the
/// mean log-likelihood of each row's choices.
fn greedy_decode(
    g: &mut Graph,
    model: &PhredModel,
    state: &ContextState,
    targets: &[usize],
    noise: &NoiseDraw,
    max_len: usize,
) -> Result<(Vec<Vec<usize>>, Vec<f64>), TensorError> {
    let gen = &model.generator;
    let b = targets.len();
    let mut hidden = gen.initial_decoder_state(state);
    let mut prev = vec![BOS; b];
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut ll = vec![0.0f64; b];
    let mut done = vec![false; b];
    for j in 0..max_len {
        let (logits, h) = gen.decode_step(g, state, &prev, targets, noise.step(j), &hidden)?;
        hidden = h;
        let lt = g.value(logits);
        for r in 0..b {
            if done[r] {
                prev[r] = EOS;
                continue;
            }
            let row = lt.row(r);
            let best = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            let m = row[best] as f64;
            let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
            ll[r] += row[best] as f64 - lse;
            rows[r].push(best);
            prev[r] = best;
            done[r] = best == EOS;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    for (l, r) in ll.iter_mut().zip(&rows) {
        *l /= r.len().max(1) as f64;
    }
    Ok((rows, ll))
}

struct Scores {
    word_probs: Vec<Vec<f64>>,
    att_log: Vec<Option<f64>>,
}

/// Discriminator scores of generated rows given the context state.
fn score_rows(g: &mut Graph, model: &PhredModel, state: &ContextState, rows: &[Vec<usize>], targets: &[usize]) -> Result<Scores, TensorError> {
    let n = rows.len();
    let mut scores = Scores { word_probs: vec![Vec::new(); n], att_log: vec![None; n] };
    let Some(adv) = &model.adversary else { return Ok(scores) };
    let batch = TurnBatch::from_rows(rows, targets.to_vec(), None);
    let attrs = adv.conditioned().then_some(targets);
    let p = adv.word_probs(g, &state.hidden, &batch, attrs)?;
    let pv = g.value(p);
    for (r, row) in rows.iter().enumerate() {
        scores.word_probs[r] = pv.row(r)[..row.len()].iter().map(|&x| x as f64).collect();
    }
    if let Some(att) = &model.attribute_discriminator {
        let d = att.predict(g, &state.hidden, &batch)?;
        let dv = g.value(d);
        for r in 0..n {
            let p = (dv.row(r)[targets[r]] as f64).max(crate::training::P_MIN as f64);
            scores.att_log[r] = Some(p.ln());
        }
    }
    Ok(scores)
}

/// Encodes a single context (most recent `max_turns - 1` turns, each cut to
/// `max_len - 1` tokens plus `EOS`).
fn encode_context(g: &mut Graph, model: &PhredModel, context: &[ContextTurn]) -> Result<ContextState, InferenceError> {
    let keep = model.config.max_turns.saturating_sub(1).max(1);
    let start = context.len().saturating_sub(keep);
    let mut state = ContextState::zero(g, &model.generator, 1);
    for turn in &context[start..] {
        check_attribute(model, turn.attribute)?;
        if let Some(&bad) = turn.tokens.iter().find(|&&t| t >= model.vocab_size) {
            return Err(InferenceError::InvalidToken { index: bad, count: model.vocab_size });
        }
        let mut row: Vec<usize> = turn.tokens.iter().copied().filter(|&t| t != EOS).take(model.config.max_len - 1).collect();
        row.push(EOS);
        let tb = TurnBatch::from_rows(&[row], vec![turn.attribute], None);
        state = model.generator.encode_turn(g, &state, &tb)?;
    }
    Ok(state)
}

/// Generates and ranks candidate responses. Candidates differ only through
/// their noise draws; `phred` returns one noiseless greedy decode.
pub fn generate(model: &PhredModel, req: &GenerateRequest) -> Result<Vec<GenerationCandidate>, InferenceError> {
    if req.context.is_empty() {
        return Err(InferenceError::EmptyContext);
    }
    check_attribute(model, req.target)?;
    if req.num_candidates == 0 {
        return Err(InferenceError::InvalidArgument("num_candidates must be at least 1".into()));
    }
    let max_len = req.max_len.unwrap_or(model.config.max_len);
    if max_len == 0 {
        return Err(InferenceError::InvalidArgument("max_len must be at least 1".into()));
    }
    let variant = model.variant();
    let alpha = req.alpha.unwrap_or(model.generator.noise.std);
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(InferenceError::InvalidArgument(format!("noise scale must be nonnegative, got {alpha}")));
    }
    let (count, spec) = if variant == Variant::Phred {
        (1, NoiseSpec { std: 0.0, ..model.generator.noise })
    } else {
        (req.num_candidates, NoiseSpec { std: alpha, ..model.generator.noise })
    };
    let mut g = Graph::inference(&model.store);
    let single = encode_context(&mut g, model, &req.context)?;
    let state = single.replicate(&mut g, count)?;
    let mut rng = SeededEngine::with_stream(req.seed, GENERATE_STREAM);
    let noise = sample_noise(&spec, count, max_len, &mut rng);
    let targets = vec![req.target; count];
    let (rows, ll) = greedy_decode(&mut g, model, &state, &targets, &noise, max_len)?;
    let scores = score_rows(&mut g, model, &state, &rows, &targets)?;
    let mut out: Vec<GenerationCandidate> = rows
        .into_iter()
        .zip(ll)
        .zip(scores.word_probs.into_iter().zip(scores.att_log))
        .map(|((tokens, generator_ll), (word_probs, att))| {
            let adv = (!word_probs.is_empty()).then(|| mean_log(&word_probs));
            let rank = rank_score(variant, adv, att, tokens.len(), generator_ll);
            GenerationCandidate {
                tokens,
                word_probs,
                adv_score: adv,
                att_log_confidence: att,
                generator_log_likelihood: generator_ll,
                rank_score: rank,
            }
        })
        .collect();
    out.sort_by(|a, b| b.rank_score.total_cmp(&a.rank_score));
    Ok(out)
}

/// Result of the noise-scale search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub best_alpha: f32,
    pub best_score: f64,
    /// `(α, mean −log D_adv per generated word)` for every grid point.
    pub table: Vec<(f32, f64)>,
}

/// Smallest score wins; ties keep the earlier (smaller) α.
pub fn argmin_alpha(table: &[(f32, f64)]) -> Option<(f32, f64)> {
    let mut best: Option<(f32, f64)> = None;
    for &(a, s) in table {
        let better = match best {
            None => true,
            Some((ba, bs)) => s < bs || (s == bs && a < ba),
        };
        if better {
            best = Some((a, s));
        }
    }
    best
}

/// Mean over generated words of `−log D_adv` when every response of
/// `validation` is generated greedily (one candidate) with noise scale
/// `alpha`. The noise stream depends only on `(seed, alpha)`.
pub fn alpha_score(model: &PhredModel, validation: &[Conversation], alpha: f32, seed: u64, batch_size: usize) -> Result<f64, InferenceError> {
    let Some(adv) = &model.adversary else { return Err(InferenceError::NoAdversary(model.variant())) };
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(InferenceError::InvalidArgument(format!("noise scale must be nonnegative, got {alpha}")));
    }
    let spec = NoiseSpec { std: alpha, ..model.generator.noise };
    let mut rng = SeededEngine::with_stream(seed, ALPHA_STREAM ^ alpha.to_bits() as u64);
    let (max_turns, max_len) = (model.config.max_turns, model.config.max_len);
    let mut groups: std::collections::BTreeMap<usize, Vec<&Conversation>> = Default::default();
    for c in validation.iter().filter(|c| c.turns.len() >= 2) {
        groups.entry(c.turns.len().min(max_turns)).or_default().push(c);
    }
    let (mut total, mut words) = (0.0f64, 0usize);
    for group in groups.values() {
        for chunk in group.chunks(batch_size.max(1)) {
            let batch = ConversationBatch::from_conversations(chunk, max_turns, max_len);
            let mut g = Graph::inference(&model.store);
            let mut state = ContextState::zero(&mut g, &model.generator, batch.batch_size());
            for i in 0..batch.turns.len() - 1 {
                state = model.generator.encode_turn(&mut g, &state, &batch.turns[i])?;
                let targets = batch.turns[i].target_attrs.clone().expect("successor attributes");
                let noise = sample_noise(&spec, batch.batch_size(), max_len, &mut rng);
                let (rows, _) = greedy_decode(&mut g, model, &state, &targets, &noise, max_len)?;
                let tb = TurnBatch::from_rows(&rows, targets.clone(), None);
                let attrs = adv.conditioned().then_some(targets.as_slice());
                let p = adv.word_probs(&mut g, &state.hidden, &tb, attrs)?;
                let pv = g.value(p);
                for (r, row) in rows.iter().enumerate() {
                    if batch.turns[i + 1].lengths[r] == 0 {
                        continue;
                    }
                    for &x in &pv.row(r)[..row.len()] {
                        total -= (x as f64).max(crate::training::P_MIN as f64).ln();
                        words += 1;
                    }
                }
            }
        }
    }
    if words == 0 {
        return Err(InferenceError::InvalidArgument("validation corpus has no response to generate".into()));
    }
    Ok(total / words as f64)
}

/// Linear search over `grid` for the noise scale whose generations the
/// adversarial discriminator finds most plausible.
pub fn alpha_search(model: &PhredModel, validation: &[Conversation], grid: &[f32], seed: u64, batch_size: usize) -> Result<AlphaSearch, InferenceError> {
    if grid.is_empty() {
        return Err(InferenceError::InvalidArgument("empty noise-scale grid".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &a in grid {
        let s = alpha_score(model, validation, a, seed, batch_size)?;
        log::debug!("alpha {a}: {s:.6}");
        table.push((a, s));
    }
    let (best_alpha, best_score) = argmin_alpha(&table).expect("nonempty grid");
    Ok(AlphaSearch { best_alpha, best_score, table })
}
