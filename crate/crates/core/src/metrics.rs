//! Automatic response metrics and human-ranking aggregation.
//!
//! BLEU and ROUGE-2 pool n-gram counts over the whole corpus before
//! dividing. Hypotheses and references are token sequences.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Conversation};
use crate::model::PhredModel;

/// Count substituted for a zero n-gram match count in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no samples")]
    Empty,
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("sample {sample}, judge {judge}: ranks {ranks:?} are not a permutation of 0..{models}")]
    InvalidRanking { sample: usize, judge: usize, ranks: Vec<usize>, models: usize },
    #[error("{0}")]
    Invalid(String),
}

fn aligned<T>(hyps: &[T], refs: &[T]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Multiset of the `n`-grams of `tokens`.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

fn clipped_overlap(h: &HashMap<Vec<&str>, usize>, r: &HashMap<Vec<&str>, usize>) -> usize {
    h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum()
}

/// Corpus BLEU with uniform weights over orders `1..=n` and the brevity
/// penalty. A zero match count at some order is replaced by
/// [`BLEU_EPSILON`] so the geometric mean stays finite.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], n: usize) -> Result<f64, MetricError> {
    aligned(hyps, refs)?;
    if n == 0 {
        return Err(MetricError::Invalid("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for k in 1..=n {
            let hc = ngram_counts(h, k);
            matches[k - 1] += clipped_overlap(&hc, &ngram_counts(r, k));
            totals[k - 1] += hc.values().sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| {
            let m = if matches[k] == 0 { BLEU_EPSILON } else { matches[k] as f64 };
            (m / totals[k].max(1) as f64).ln()
        })
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Corpus ROUGE-2 F1 from pooled clipped bigram overlaps.
pub fn rouge2_f1<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64, MetricError> {
    aligned(hyps, refs)?;
    let (mut overlap, mut hyp_total, mut ref_total) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let hc = ngram_counts(h, 2);
        let rc = ngram_counts(r, 2);
        overlap += clipped_overlap(&hc, &rc);
        hyp_total += hc.values().sum::<usize>();
        ref_total += rc.values().sum::<usize>();
    }
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Distinct `n`-grams over all `n`-gram occurrences in `hyps`.
pub fn distinct_n<S: AsRef<str>>(hyps: &[Vec<S>], n: usize) -> Result<f64, MetricError> {
    if hyps.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut unique: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        for (g, c) in ngram_counts(h, n) {
            total += c;
            unique.insert(g);
        }
    }
    Ok(if total == 0 { 0.0 } else { unique.len() as f64 / total as f64 })
}

/// Mean ratio of hypothesis length to reference length.
pub fn nasl<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64, MetricError> {
    aligned(hyps, refs)?;
    let mut sum = 0.0;
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            return Err(MetricError::EmptyReference(i));
        }
        sum += h.len() as f64 / r.len() as f64;
    }
    Ok(sum / hyps.len() as f64)
}

/// `exp(nll / tokens)`.
pub fn perplexity_from_nll(nll: f64, tokens: usize) -> Result<f64, MetricError> {
    if tokens == 0 {
        return Err(MetricError::Empty);
    }
    Ok((nll / tokens as f64).exp())
}

/// Teacher-forced perplexity of `model` over every response token of
/// `conversations`, with the model's training noise when `noise` is set.
pub fn perplexity(model: &PhredModel, conversations: &[Conversation], noise: bool, seed: u64) -> Result<f64, MetricError> {
    let totals = crate::training::teacher_forced_nll(model, conversations, 32, noise, seed).map_err(|e| MetricError::Invalid(e.to_string()))?;
    perplexity_from_nll(totals.nll, totals.tokens)
}

/// Per-model human judgement summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanScore {
    pub mean: f64,
    pub std_error: f64,
}

/// Aggregates rankings `ranks[sample][judge][model]`, where each judge
/// ranks the `N` models of a sample from 0 (worst) to `N − 1` (best)
/// without ties. Scores are divided by `N − 1`. The mean is over samples
/// and judges; the standard error is
/// `sqrt(Σ_samples var_judges / samples²)` with the population variance
/// over judges.
pub fn human_eval_aggregate(ranks: &[Vec<Vec<usize>>]) -> Result<Vec<HumanScore>, MetricError> {
    let samples = ranks.len();
    let first = ranks.first().ok_or(MetricError::Empty)?;
    let judges = first.len();
    let models = first.first().ok_or(MetricError::Empty)?.len();
    if models < 2 {
        return Err(MetricError::Invalid("ranking needs at least two models".into()));
    }
    for (s, sample) in ranks.iter().enumerate() {
        if sample.len() != judges {
            return Err(MetricError::Invalid(format!("sample {s} has {} judges, expected {judges}", sample.len())));
        }
        for (j, r) in sample.iter().enumerate() {
            let mut sorted = r.clone();
            sorted.sort_unstable();
            if sorted != (0..models).collect::<Vec<_>>() {
                return Err(MetricError::InvalidRanking { sample: s, judge: j, ranks: r.clone(), models });
            }
        }
    }
    let norm = (models - 1) as f64;
    Ok((0..models)
        .map(|m| {
            let mut total = 0.0;
            let mut var_sum = 0.0;
            for sample in ranks {
                let scores: Vec<f64> = sample.iter().map(|r| r[m] as f64 / norm).collect();
                let mean = scores.iter().sum::<f64>() / judges as f64;
                total += scores.iter().sum::<f64>();
                var_sum += scores.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / judges as f64;
            }
            HumanScore {
                mean: total / (samples * judges) as f64,
                std_error: (var_sum / (samples * samples) as f64).sqrt(),
            }
        })
        .collect())
}

/// One line of a hypothesis/reference file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub context_id: String,
    pub hypothesis: String,
    pub reference: String,
}

pub fn parse_eval_line(line: &str) -> Result<EvalPair, String> {
    serde_json::from_str(line).map_err(|e| e.to_string())
}

/// Parses a JSON-lines hypothesis/reference file; blank lines are skipped.
pub fn parse_eval_pairs(text: &str) -> Result<Vec<EvalPair>, MetricError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_eval_line(l).map_err(|e| MetricError::Invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn load_eval_pairs(path: &Path) -> Result<Vec<EvalPair>, MetricError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricError::Invalid(format!("{}: {e}", path.display())))?;
    parse_eval_pairs(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: Option<f64>,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge2_f1: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub nasl: f64,
    pub samples: usize,
}

/// Text metrics over hypothesis/reference pairs.
pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<EvalReport, MetricError> {
    let hyps: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.hypothesis)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.reference)).collect();
    Ok(EvalReport {
        perplexity: None,
        bleu2: bleu(&hyps, &refs, 2)?,
        bleu4: bleu(&hyps, &refs, 4)?,
        rouge2_f1: rouge2_f1(&hyps, &refs)?,
        distinct1: distinct_n(&hyps, 1)?,
        distinct2: distinct_n(&hyps, 2)?,
        nasl: nasl(&hyps, &refs)?,
        samples: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu(&[s("a b c")], &[s("a b d")], 2).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(bleu(&[s("x y z w")], &[s("x y z w")], 4).unwrap(), 1.0);
        assert!(bleu(&[s("p q r")], &[s("a b c")], 2).unwrap() < 1e-8);
        assert!(matches!(bleu(&[s("a")], &[], 2), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge2_f1(&[s("a b c")], &[s("a b c")]).unwrap(), 1.0);
        assert!((rouge2_f1(&[s("a b c")], &[s("a b d")]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(rouge2_f1(&[s("a")], &[s("a b")]).unwrap(), 0.0);
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&[s("a a a")], 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[s("a b c d")], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&[s("a b"), s("a b")], 2).unwrap(), 0.5);
        assert_eq!(distinct_n(&[s("a")], 2).unwrap(), 0.0);
    }

    #[test]
    fn nasl_examples() {
        assert_eq!(nasl(&[s("a b")], &[s("c d")]).unwrap(), 1.0);
        assert_eq!(nasl(&[s("a b c d")], &[s("c d")]).unwrap(), 2.0);
        let h = [s("a b c"), s("a b c d e f")];
        let r = [s("1 2 3 4 5 6"), s("1 2 3 4 5 6")];
        assert!((nasl(&h, &r).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(nasl(&[s("a")], &[vec![]]), Err(MetricError::EmptyReference(0)));
    }

    #[test]
    fn human_eval_examples() {
        let top = human_eval_aggregate(&[vec![vec![1, 0], vec![1, 0]], vec![vec![1, 0], vec![1, 0]]]).unwrap();
        assert_eq!(top[0], HumanScore { mean: 1.0, std_error: 0.0 });
        let spread = human_eval_aggregate(&[vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]]]).unwrap();
        assert!((spread[0].mean - 0.5).abs() < 1e-12);
        assert!(human_eval_aggregate(&[vec![vec![1, 1]]]).is_err());
    }

    #[test]
    fn perplexity_arithmetic() {
        assert_eq!(perplexity_from_nll(0.0, 5).unwrap(), 1.0);
        assert!((perplexity_from_nll(10.0 * 4f64.ln(), 10).unwrap() - 4.0).abs() < 1e-12);
        assert!(perplexity_from_nll(1.0, 0).is_err());
    }

    #[test]
    fn eval_lines() {
        let p = parse_eval_line(r#"{"context_id":"c1","hypothesis":"a b","reference":"a b"}"#).unwrap();
        assert_eq!(p.context_id, "c1");
        assert!(parse_eval_line(r#"{"context_id":"c1","hypothesis":"a"}"#).is_err());
        assert!(parse_eval_line(r#"{"context_id":"c1","hypothesis":"a","reference":"b","x":1}"#).is_err());
        let r = evaluate_pairs(&[p]).unwrap();
        assert_eq!(r.bleu2, 1.0);
    }
}
