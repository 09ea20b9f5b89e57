//! Recurrent and attention layers built on the tape.

use crate::tensor::{Graph, ParamId, ParameterStore, Result, SeededEngine, Tensor, TensorError, Var};

/// `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, output: usize, rng: &mut SeededEngine) -> Result<Self> {
        let weight = store.xavier(format!("{name}.weight"), input, output, rng)?;
        let bias = store.zeros(format!("{name}.bias"), vec![1, output])?;
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// A single gated recurrent unit; gate blocks are ordered reset | update |
/// candidate in both weight matrices (see [`Graph::gru_update`]).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, rng: &mut SeededEngine) -> Result<Self> {
        Ok(Self {
            w_input: store.xavier(format!("{name}.w_input"), input, 3 * hidden, rng)?,
            w_hidden: store.xavier(format!("{name}.w_hidden"), hidden, 3 * hidden, rng)?,
            b_input: store.zeros(format!("{name}.b_input"), vec![1, 3 * hidden])?,
            b_hidden: store.zeros(format!("{name}.b_hidden"), vec![1, 3 * hidden])?,
            input,
            hidden,
        })
    }

    /// One step; rows with `mask = 0` keep their previous state.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, mask: Option<&[f32]>) -> Result<Var> {
        let (xw, hw) = (g.value(x).cols(), g.value(h).cols());
        if xw != self.input || hw != self.hidden {
            return Err(TensorError::ShapeMismatch {
                op: "gru_cell_step",
                lhs: vec![self.input, self.hidden],
                rhs: vec![xw, hw],
            });
        }
        let (wi, wh, bi, bh) = (
            g.param(self.w_input),
            g.param(self.w_hidden),
            g.param(self.b_input),
            g.param(self.b_hidden),
        );
        let gi = g.matmul(x, wi)?;
        let gi = g.add_row(gi, bi)?;
        let gh = g.matmul(h, wh)?;
        let gh = g.add_row(gh, bh)?;
        g.gru_update(gi, gh, h, mask)
    }
}

/// Stacked unidirectional GRU: layer `l + 1` consumes the new state of layer `l`.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub cells: Vec<GruCell>,
}

impl GruStack {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut SeededEngine,
    ) -> Result<Self> {
        let cells = (0..layers)
            .map(|l| GruCell::new(store, &format!("{name}.l{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cells })
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: &[Var], mask: Option<&[f32]>) -> Result<Vec<Var>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, &h) in self.cells.iter().zip(state) {
            let h2 = cell.step(g, input, h, mask)?;
            next.push(h2);
            input = h2;
        }
        Ok(next)
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> Vec<Var> {
        (0..self.cells.len()).map(|_| g.constant(Tensor::zeros(vec![batch, self.hidden()]))).collect()
    }
}

/// Result of a bidirectional pass over a padded sequence.
pub struct BiGruOutput {
    /// Top-layer `[forward | backward]` output per position, `batch × 2H`.
    pub outputs: Vec<Var>,
    /// Final forward state per layer (state after the last real token).
    pub final_forward: Vec<Var>,
    /// Final backward state per layer (state after reading position 0).
    pub final_backward: Vec<Var>,
}

/// Stacked bidirectional GRU. Layer `l + 1` reads the concatenated forward
/// and backward outputs of layer `l`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub forward: Vec<GruCell>,
    pub backward: Vec<GruCell>,
}

impl BiGru {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut SeededEngine,
    ) -> Result<Self> {
        let mut forward = Vec::with_capacity(layers);
        let mut backward = Vec::with_capacity(layers);
        for l in 0..layers {
            let width = if l == 0 { input } else { 2 * hidden };
            forward.push(GruCell::new(store, &format!("{name}.fwd.l{l}"), width, hidden, rng)?);
            backward.push(GruCell::new(store, &format!("{name}.bwd.l{l}"), width, hidden, rng)?);
        }
        Ok(Self { forward, backward })
    }

    pub fn hidden(&self) -> usize {
        self.forward[0].hidden
    }

    pub fn layers(&self) -> usize {
        self.forward.len()
    }

    /// Runs over `inputs` (one `batch × in` var per position). `masks[t][b]`
    /// is 1 for real tokens; padded positions leave the state untouched, so
    /// each direction's final state reflects only the real tokens. `init`
    /// seeds both directions of every layer (zeros when absent).
    pub fn run(&self, g: &mut Graph, inputs: &[Var], masks: &[Vec<f32>], init: Option<&[Var]>) -> Result<BiGruOutput> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument { op: "bigru", msg: "empty sequence".into() });
        }
        let batch = g.value(inputs[0]).rows();
        let hidden = self.hidden();
        let mut layer_inputs = inputs.to_vec();
        let mut final_forward = Vec::with_capacity(self.layers());
        let mut final_backward = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let start = |g: &mut Graph| match init {
                Some(states) => states[l],
                None => g.constant(Tensor::zeros(vec![batch, hidden])),
            };
            let mut h = start(g);
            let mut fwd_out = Vec::with_capacity(layer_inputs.len());
            for (t, &x) in layer_inputs.iter().enumerate() {
                h = self.forward[l].step(g, x, h, Some(&masks[t]))?;
                fwd_out.push(h);
            }
            final_forward.push(h);
            let mut h = start(g);
            let mut bwd_out = vec![h; layer_inputs.len()];
            for t in (0..layer_inputs.len()).rev() {
                h = self.backward[l].step(g, layer_inputs[t], h, Some(&masks[t]))?;
                bwd_out[t] = h;
            }
            final_backward.push(h);
            layer_inputs = fwd_out
                .into_iter()
                .zip(bwd_out)
                .map(|(f, b)| g.concat_cols(&[f, b]))
                .collect::<Result<_>>()?;
        }
        Ok(BiGruOutput { outputs: layer_inputs, final_forward, final_backward })
    }
}

/// Additive (Bahdanau) attention: `score_t = v·tanh(W_q q + W_k k_t + b)`.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub bias: ParamId,
    pub v: ParamId,
}

/// Keys already pushed through `W_k`, reused across decoder steps.
pub struct ProjectedKeys {
    pub projected: Vec<Var>,
    pub values: Vec<Var>,
    /// `batch × T` additive mask: 0 for real positions, a large negative
    /// number for padding.
    pub mask_bias: Option<Var>,
}

const MASKED_SCORE: f32 = -1.0e9;

impl AdditiveAttention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        query: usize,
        key: usize,
        attn: usize,
        rng: &mut SeededEngine,
    ) -> Result<Self> {
        Ok(Self {
            w_query: store.xavier(format!("{name}.w_query"), query, attn, rng)?,
            w_key: store.xavier(format!("{name}.w_key"), key, attn, rng)?,
            bias: store.zeros(format!("{name}.bias"), vec![1, attn])?,
            v: store.xavier(format!("{name}.v"), attn, 1, rng)?,
        })
    }

    /// `masks[t][b]` marks real positions; every row needs at least one.
    pub fn project_keys(&self, g: &mut Graph, keys: &[Var], values: &[Var], masks: Option<&[Vec<f32>]>) -> Result<ProjectedKeys> {
        if keys.is_empty() {
            return Err(TensorError::InvalidArgument { op: "additive_attention", msg: "empty key sequence".into() });
        }
        if keys.len() != values.len() {
            return Err(TensorError::InvalidArgument {
                op: "additive_attention",
                msg: format!("{} keys but {} values", keys.len(), values.len()),
            });
        }
        let wk = g.param(self.w_key);
        let projected = keys.iter().map(|&k| g.matmul(k, wk)).collect::<Result<Vec<_>>>()?;
        let mask_bias = match masks {
            Some(m) => {
                let batch = g.value(keys[0]).rows();
                let t = keys.len();
                let mut data = vec![0.0; batch * t];
                for (pos, col) in m.iter().enumerate() {
                    for (b, &keep) in col.iter().enumerate() {
                        if keep == 0.0 {
                            data[b * t + pos] = MASKED_SCORE;
                        }
                    }
                }
                Some(g.constant(Tensor::matrix(batch, t, data)?))
            }
            None => None,
        };
        Ok(ProjectedKeys { projected, values: values.to_vec(), mask_bias })
    }

    /// Returns `(context, weights)` where `weights` is `batch × T` and each
    /// row sums to one.
    pub fn attend(&self, g: &mut Graph, query: Var, keys: &ProjectedKeys) -> Result<(Var, Var)> {
        let wq = g.param(self.w_query);
        let bias = g.param(self.bias);
        let v = g.param(self.v);
        let q = g.matmul(query, wq)?;
        let q = g.add_row(q, bias)?;
        let mut scores = Vec::with_capacity(keys.projected.len());
        for &k in &keys.projected {
            let s = g.add(q, k)?;
            let s = g.tanh(s)?;
            scores.push(g.matmul(s, v)?);
        }
        let mut scores = g.concat_cols(&scores)?;
        if let Some(m) = keys.mask_bias {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores)?;
        let mut context = None;
        for (t, &value) in keys.values.iter().enumerate() {
            let w = g.slice_cols(weights, t, 1)?;
            let term = g.mul_col(value, w)?;
            context = Some(match context {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok((context.expect("nonempty"), weights))
    }
}

/// Convenience form of [`AdditiveAttention`] over unmasked sequences.
pub fn additive_attention(
    g: &mut Graph,
    attention: &AdditiveAttention,
    query: Var,
    keys: &[Var],
    values: &[Var],
) -> Result<(Var, Var)> {
    let projected = attention.project_keys(g, keys, values, None)?;
    attention.attend(g, query, &projected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rng: &mut SeededEngine, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn gru_zero_everything_is_zero() {
        let mut store = ParameterStore::new();
        let mut rng = SeededEngine::new(0);
        let cell = GruCell::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        for id in [cell.w_input, cell.w_hidden] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        let h = g.constant(Tensor::zeros(vec![1, 4]));
        let out = cell.step(&mut g, x, h, None).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_width_mismatch_is_rejected() {
        let mut store = ParameterStore::new();
        let mut rng = SeededEngine::new(0);
        let cell = GruCell::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(vec![1, 2]));
        let h = g.constant(Tensor::zeros(vec![1, 4]));
        assert!(matches!(cell.step(&mut g, x, h, None), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn gru_hidden_shape_persists() {
        let mut store = ParameterStore::new();
        let mut rng = SeededEngine::new(1);
        let cell = GruCell::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let mut h = g.constant(Tensor::zeros(vec![2, 4]));
        for _ in 0..10 {
            let x = g.constant(rand_tensor(&mut rng, 2, 3));
            h = cell.step(&mut g, x, h, None).unwrap();
            assert_eq!(g.value(h).shape(), &[2, 4]);
        }
    }

    fn attention_fixture(seed: u64) -> (ParameterStore, AdditiveAttention, SeededEngine) {
        let mut store = ParameterStore::new();
        let mut rng = SeededEngine::new(seed);
        let att = AdditiveAttention::new(&mut store, "att", 4, 3, 5, &mut rng).unwrap();
        (store, att, rng)
    }

    #[test]
    fn single_key_returns_value() {
        let (store, att, mut rng) = attention_fixture(2);
        let mut g = Graph::inference(&store);
        let q = g.constant(rand_tensor(&mut rng, 1, 4));
        let k = g.constant(rand_tensor(&mut rng, 1, 3));
        let v = g.constant(rand_tensor(&mut rng, 1, 6));
        let (ctx, w) = additive_attention(&mut g, &att, q, &[k], &[v]).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), g.value(v).data());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (store, att, mut rng) = attention_fixture(3);
        let mut g = Graph::inference(&store);
        let q = g.constant(rand_tensor(&mut rng, 1, 4));
        let key = rand_tensor(&mut rng, 1, 3);
        let keys: Vec<Var> = (0..4).map(|_| g.constant(key.clone())).collect();
        let values: Vec<Var> = (0..4).map(|_| g.constant(rand_tensor(&mut rng, 1, 2))).collect();
        let (_, w) = additive_attention(&mut g, &att, q, &keys, &values).unwrap();
        for &p in g.value(w).data() {
            assert!((p - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let (store, att, mut rng) = attention_fixture(4);
        let mut g = Graph::inference(&store);
        let q = g.constant(rand_tensor(&mut rng, 3, 4));
        let keys: Vec<Var> = (0..7).map(|_| g.constant(rand_tensor(&mut rng, 3, 3))).collect();
        let (_, w) = additive_attention(&mut g, &att, q, &keys, &keys).unwrap();
        for row in g.value(w).data().chunks(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn empty_keys_rejected() {
        let (store, att, mut rng) = attention_fixture(5);
        let mut g = Graph::inference(&store);
        let q = g.constant(rand_tensor(&mut rng, 1, 4));
        assert!(additive_attention(&mut g, &att, q, &[], &[]).is_err());
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let (store, att, mut rng) = attention_fixture(6);
        let mut g = Graph::inference(&store);
        let q = g.constant(rand_tensor(&mut rng, 2, 4));
        let keys: Vec<Var> = (0..3).map(|_| g.constant(rand_tensor(&mut rng, 2, 3))).collect();
        let masks = vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0]];
        let pk = att.project_keys(&mut g, &keys, &keys, Some(&masks)).unwrap();
        let (_, w) = att.attend(&mut g, q, &pk).unwrap();
        let w = g.value(w).data();
        assert_eq!(w[2], 0.0);
        assert_eq!(w[4], 0.0);
        assert_eq!(w[5], 0.0);
        assert!((w[3] - 1.0).abs() < 1e-6);
    }
}
