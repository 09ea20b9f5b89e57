use super::Generator;
use crate::config::ModelConfig;
use crate::corpus::TurnBatch;
use crate::nn::{BiGru, GruStack, Linear};
use crate::tensor::{Graph, ParamId, ParameterStore, Result, SeededEngine, TensorError, Var};

/// Word-level adversarial discriminator: a bidirectional RNN over the
/// utterance whose states start from the dialogue context, with a sigmoid
/// head per word giving the probability that the word is ground truth.
#[derive(Debug, Clone)]
pub struct AdvDiscriminator {
    pub word_embedding: ParamId,
    /// Present iff the discriminator is attribute-conditioned.
    pub attribute_embedding: Option<ParamId>,
    pub rnn: BiGru,
    pub head: Linear,
}

impl AdvDiscriminator {
    pub fn new(
        store: &mut ParameterStore,
        cfg: &ModelConfig,
        generator: &Generator,
        conditioned: bool,
        rng: &mut SeededEngine,
    ) -> Result<Self> {
        let input = cfg.embedding_dim + if conditioned { cfg.attribute_dim } else { 0 };
        Ok(Self {
            word_embedding: generator.word_embedding,
            attribute_embedding: conditioned.then_some(generator.attribute_embedding),
            rnn: BiGru::new(store, "adversary.rnn", input, cfg.hidden_size, cfg.layers, rng)?,
            head: Linear::new(store, "adversary.head", 2 * cfg.hidden_size, 1, rng)?,
        })
    }

    pub fn conditioned(&self) -> bool {
        self.attribute_embedding.is_some()
    }

    /// Per-word ground-truth probabilities as one `batch × width` var.
    /// `target_attrs` must be supplied iff the discriminator is conditioned.
    pub fn word_probs(
        &self,
        g: &mut Graph,
        context: &[Var],
        utterance: &TurnBatch,
        target_attrs: Option<&[usize]>,
    ) -> Result<Var> {
        let attr_input = match (self.attribute_embedding, target_attrs) {
            (Some(table), Some(attrs)) => {
                let n = g.param_value(table).rows();
                if let Some(bad) = attrs.iter().find(|&&a| a >= n) {
                    return Err(TensorError::InvalidArgument {
                        op: "adv_word_probs",
                        msg: format!("attribute index {bad} out of range for {n} attributes"),
                    });
                }
                let t = g.param(table);
                Some(g.embedding(t, attrs)?)
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(TensorError::InvalidArgument {
                    op: "adv_word_probs",
                    msg: "attribute-conditioned discriminator needs the target attribute".into(),
                })
            }
            (None, Some(_)) => {
                return Err(TensorError::InvalidArgument {
                    op: "adv_word_probs",
                    msg: "unconditioned discriminator takes no attribute".into(),
                })
            }
        };
        if utterance.lengths.iter().all(|&l| l == 0) {
            return Err(TensorError::InvalidArgument { op: "adv_word_probs", msg: "empty utterance".into() });
        }
        let table = g.param(self.word_embedding);
        let mut inputs = Vec::with_capacity(utterance.width);
        for t in 0..utterance.width {
            let e = g.embedding(table, &utterance.column(t))?;
            inputs.push(match attr_input {
                Some(a) => g.concat_cols(&[e, a])?,
                None => e,
            });
        }
        let out = self.rnn.run(g, &inputs, &utterance.mask_columns(), Some(context))?;
        let mut probs = Vec::with_capacity(out.outputs.len());
        for o in out.outputs {
            let logit = self.head.forward(g, o)?;
            probs.push(g.sigmoid(logit)?);
        }
        g.concat_cols(&probs)
    }
}

/// Utterance-level attribute discriminator: a unidirectional RNN seeded with
/// the dialogue context whose final state is projected to a distribution
/// over attributes.
#[derive(Debug, Clone)]
pub struct AttDiscriminator {
    pub word_embedding: ParamId,
    pub rnn: GruStack,
    pub head: Linear,
}

impl AttDiscriminator {
    pub fn new(
        store: &mut ParameterStore,
        cfg: &ModelConfig,
        generator: &Generator,
        num_attributes: usize,
        rng: &mut SeededEngine,
    ) -> Result<Self> {
        Ok(Self {
            word_embedding: generator.word_embedding,
            rnn: GruStack::new(store, "attribute.rnn", cfg.embedding_dim, cfg.hidden_size, cfg.layers, rng)?,
            head: Linear::new(store, "attribute.head", cfg.hidden_size, num_attributes, rng)?,
        })
    }

    /// `batch × Vc` attribute distribution for each utterance.
    pub fn predict(&self, g: &mut Graph, context: &[Var], utterance: &TurnBatch) -> Result<Var> {
        if utterance.lengths.iter().all(|&l| l == 0) {
            return Err(TensorError::InvalidArgument { op: "att_predict", msg: "empty utterance".into() });
        }
        let table = g.param(self.word_embedding);
        let mut state = context.to_vec();
        for t in 0..utterance.width {
            let e = g.embedding(table, &utterance.column(t))?;
            state = self.rnn.step(g, e, &state, Some(&utterance.mask_column(t)))?;
        }
        let logits = self.head.forward(g, *state.last().expect("at least one layer"))?;
        g.softmax(logits)
    }
}

/// Fraction of real word positions the adversary classifies correctly:
/// ground-truth words with `p > 0.5` and generated words with `p < 0.5`.
/// Exactly 0.5 counts as wrong. Each argument is a list of
/// `(probabilities, mask)` pairs; positions with mask 0 are ignored.
pub fn adv_accuracy(ground_truth: &[(&[f32], &[f32])], generated: &[(&[f32], &[f32])]) -> Option<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (probs, mask) in ground_truth {
        for (&p, &m) in probs.iter().zip(mask.iter()) {
            if m != 0.0 {
                total += 1;
                correct += usize::from(p > 0.5);
            }
        }
    }
    for (probs, mask) in generated {
        for (&p, &m) in probs.iter().zip(mask.iter()) {
            if m != 0.0 {
                total += 1;
                correct += usize::from(p < 0.5);
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}
