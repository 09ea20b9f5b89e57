use crate::config::{ModelConfig, NoiseMode, NoiseSpec};
use crate::corpus::{TurnBatch, BOS};
use crate::nn::{AdditiveAttention, BiGru, GruStack, Linear, ProjectedKeys};
use crate::tensor::{Graph, ParamId, ParameterStore, Result, SeededEngine, Tensor, TensorError, Var};

/// Utterance encoder, attribute-conditioned context RNN and attribute- and
/// noise-conditioned attentive decoder.
#[derive(Debug, Clone)]
pub struct Generator {
    pub word_embedding: ParamId,
    pub attribute_embedding: ParamId,
    pub encoder: BiGru,
    pub summary: Linear,
    pub context: GruStack,
    pub attention: AdditiveAttention,
    pub decoder: GruStack,
    pub output: Linear,
    pub uses_attributes: bool,
    pub attribute_dim: usize,
    pub noise: NoiseSpec,
}

/// Dialogue-level state after `turn` utterances have been encoded.
pub struct ContextState {
    /// Context RNN state per layer, `batch × H`.
    pub hidden: Vec<Var>,
    /// Word-level encoder outputs of the latest utterance, `batch × 2H` each.
    pub encoder_outputs: Vec<Var>,
    pub encoder_masks: Vec<Vec<f32>>,
    keys: Option<ProjectedKeys>,
    pub turn: usize,
    pub batch: usize,
}

impl ContextState {
    /// `h_0`: all-zero context, nothing cached.
    pub fn zero(g: &mut Graph, generator: &Generator, batch: usize) -> Self {
        Self {
            hidden: generator.context.zero_state(g, batch),
            encoder_outputs: Vec::new(),
            encoder_masks: Vec::new(),
            keys: None,
            turn: 0,
            batch,
        }
    }

    /// The same context replicated `copies` times along the batch axis
    /// (for a single-row state).
    pub fn replicate(&self, g: &mut Graph, copies: usize) -> Result<Self> {
        let rows = vec![0usize; copies];
        let mut rep = |v: Var| g.embedding(v, &rows);
        let hidden = self.hidden.iter().map(|&h| rep(h)).collect::<Result<Vec<_>>>()?;
        let encoder_outputs = self.encoder_outputs.iter().map(|&h| rep(h)).collect::<Result<Vec<_>>>()?;
        let encoder_masks = self.encoder_masks.iter().map(|m| vec![m[0]; copies]).collect();
        let keys = match &self.keys {
            Some(k) => Some(ProjectedKeys {
                projected: k.projected.iter().map(|&p| rep(p)).collect::<Result<Vec<_>>>()?,
                values: encoder_outputs.clone(),
                mask_bias: k.mask_bias.map(&mut rep).transpose()?,
            }),
            None => None,
        };
        Ok(Self { hidden, encoder_outputs, encoder_masks, keys, turn: self.turn, batch: copies })
    }
}

/// Noise for one response: a single vector per row (utterance mode) or one
/// per decoder step (word mode).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub mode: NoiseMode,
    pub vectors: Vec<Tensor>,
}

impl NoiseDraw {
    /// Noise fed at decoder step `j`.
    pub fn step(&self, j: usize) -> &Tensor {
        match self.mode {
            NoiseMode::Utterance => &self.vectors[0],
            NoiseMode::Word => &self.vectors[j],
        }
    }
}

/// Draws `N(0, std²)` noise of width `spec.dim` for `batch` rows. A zero
/// standard deviation yields exact zeros without consuming randomness.
pub fn sample_noise(spec: &NoiseSpec, batch: usize, length: usize, rng: &mut SeededEngine) -> NoiseDraw {
    assert!(length >= 1, "noise length must be at least 1");
    let count = match spec.mode {
        NoiseMode::Utterance => 1,
        NoiseMode::Word => length,
    };
    let vectors = (0..count)
        .map(|_| {
            let data = if spec.std == 0.0 { vec![0.0; batch * spec.dim] } else { rng.normal_vec(batch * spec.dim, spec.std) };
            Tensor::matrix(batch, spec.dim, data).expect("positive extents")
        })
        .collect();
    NoiseDraw { mode: spec.mode, vectors }
}

impl Generator {
    pub fn new(
        store: &mut ParameterStore,
        cfg: &ModelConfig,
        vocab_size: usize,
        num_attributes: usize,
        rng: &mut SeededEngine,
    ) -> Result<Self> {
        let h = cfg.hidden_size;
        let word_embedding = store.xavier("shared.embedding.words", vocab_size, cfg.embedding_dim, rng)?;
        let attribute_embedding = store.xavier("shared.embedding.attributes", num_attributes, cfg.attribute_dim, rng)?;
        let encoder = BiGru::new(store, "shared.encoder", cfg.embedding_dim, h, cfg.layers, rng)?;
        let summary = Linear::new(store, "shared.summary", 2 * h, h, rng)?;
        let context = GruStack::new(store, "shared.context", h + cfg.attribute_dim, h, cfg.layers, rng)?;
        let attention = AdditiveAttention::new(store, "generator.attention", h, 2 * h, cfg.attention_dim, rng)?;
        let noise = cfg.noise();
        let decoder_input = cfg.embedding_dim + 2 * h + cfg.attribute_dim + noise.dim;
        let decoder = GruStack::new(store, "generator.decoder", decoder_input, h, cfg.layers, rng)?;
        let output = Linear::new(store, "generator.output", h, vocab_size, rng)?;
        Ok(Self {
            word_embedding,
            attribute_embedding,
            encoder,
            summary,
            context,
            attention,
            decoder,
            output,
            uses_attributes: cfg.variant.uses_attributes(),
            attribute_dim: cfg.attribute_dim,
            noise,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.output.output
    }

    pub fn num_attributes(&self, store: &ParameterStore) -> usize {
        store.get(self.attribute_embedding).rows()
    }

    /// Embeddings of `tokens`, one `batch × d` var per position.
    pub fn embed_columns(&self, g: &mut Graph, utterance: &TurnBatch) -> Result<Vec<Var>> {
        let table = g.param(self.word_embedding);
        (0..utterance.width).map(|t| g.embedding(table, &utterance.column(t))).collect()
    }

    /// Attribute embeddings, or zeros when attributes are disabled.
    pub fn attribute_input(&self, g: &mut Graph, attrs: &[usize]) -> Result<Var> {
        if self.uses_attributes {
            let table = g.param(self.attribute_embedding);
            g.embedding(table, attrs)
        } else {
            Ok(g.constant(Tensor::zeros(vec![attrs.len(), self.attribute_dim])))
        }
    }

    fn check_attributes(&self, g: &Graph, attrs: &[usize]) -> Result<()> {
        if !self.uses_attributes {
            return Ok(());
        }
        let n = g.param_value(self.attribute_embedding).rows();
        match attrs.iter().find(|&&a| a >= n) {
            Some(bad) => Err(TensorError::InvalidArgument {
                op: "encode_turn",
                msg: format!("attribute index {bad} out of range for {n} attributes"),
            }),
            None => Ok(()),
        }
    }

    /// Encodes utterance `i` with its source attribute and advances the
    /// context RNN one step (rows whose turn is absent keep their state).
    pub fn encode_turn(&self, g: &mut Graph, state: &ContextState, turn: &TurnBatch) -> Result<ContextState> {
        if turn.batch_size() != state.batch {
            return Err(TensorError::InvalidArgument {
                op: "encode_turn",
                msg: format!("turn batch {} does not match context batch {}", turn.batch_size(), state.batch),
            });
        }
        if turn.lengths.iter().all(|&l| l == 0) {
            return Err(TensorError::InvalidArgument { op: "encode_turn", msg: "empty utterance".into() });
        }
        self.check_attributes(g, &turn.source_attrs)?;
        let inputs = self.embed_columns(g, turn)?;
        let masks = turn.mask_columns();
        let enc = self.encoder.run(g, &inputs, &masks, None)?;
        let top = self.encoder.layers() - 1;
        let summary_in = g.concat_cols(&[enc.final_forward[top], enc.final_backward[top]])?;
        let summary = self.summary.forward(g, summary_in)?;
        let attr = self.attribute_input(g, &turn.source_attrs)?;
        let x = g.concat_cols(&[summary, attr])?;
        let present = turn.present();
        let hidden = self.context.step(g, x, &state.hidden, Some(&present))?;
        let keys = self.attention.project_keys(g, &enc.outputs, &enc.outputs, Some(&masks))?;
        Ok(ContextState {
            hidden,
            encoder_outputs: enc.outputs,
            encoder_masks: masks,
            keys: Some(keys),
            turn: state.turn + 1,
            batch: state.batch,
        })
    }

    /// The decoder starts from the context state, layer by layer.
    pub fn initial_decoder_state(&self, state: &ContextState) -> Vec<Var> {
        state.hidden.clone()
    }

    /// One decoder step. Returns `(logits, new decoder state)`.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        state: &ContextState,
        prev_tokens: &[usize],
        target_attrs: &[usize],
        noise: &Tensor,
        dec_hidden: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let keys = state.keys.as_ref().ok_or_else(|| TensorError::InvalidArgument {
            op: "decode_step",
            msg: "no encoder outputs cached; encode a turn first".into(),
        })?;
        if noise.cols() != self.noise.dim {
            return Err(TensorError::ShapeMismatch {
                op: "decode_step noise",
                lhs: vec![prev_tokens.len(), self.noise.dim],
                rhs: noise.shape().to_vec(),
            });
        }
        self.check_attributes(g, target_attrs)?;
        let table = g.param(self.word_embedding);
        let emb = g.embedding(table, prev_tokens)?;
        let query = *dec_hidden.last().expect("at least one layer");
        let (ctx, _) = self.attention.attend(g, query, keys)?;
        let attr = self.attribute_input(g, target_attrs)?;
        let z = g.constant(noise.clone());
        let x = g.concat_cols(&[emb, ctx, attr, z])?;
        let hidden = self.decoder.step(g, x, dec_hidden, None)?;
        let logits = self.output.forward(g, *hidden.last().expect("at least one layer"))?;
        Ok((logits, hidden))
    }

    /// Teacher-forced logits for the gold `response`: step `j` consumes gold
    /// token `j - 1` (`BOS` at `j = 0`). One `batch × V` var per position.
    pub fn teacher_forced_logits(
        &self,
        g: &mut Graph,
        state: &ContextState,
        response: &TurnBatch,
        target_attrs: &[usize],
        noise: &NoiseDraw,
    ) -> Result<Vec<Var>> {
        let mut hidden = self.initial_decoder_state(state);
        let mut prev = vec![BOS; response.batch_size()];
        let mut out = Vec::with_capacity(response.width);
        for j in 0..response.width {
            let (logits, h) = self.decode_step(g, state, &prev, target_attrs, noise.step(j), &hidden)?;
            out.push(logits);
            hidden = h;
            prev = response.column(j);
        }
        Ok(out)
    }
}
