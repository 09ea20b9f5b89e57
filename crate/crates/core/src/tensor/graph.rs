use std::collections::BTreeMap;

use super::{gemm, ParamId, ParameterStore, Result, SeededEngine, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f32),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f32, f32),
    Softmax(Var),
    LogSoftmax(Var),
    Embedding(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f32>),
    Gru(GruCache),
}

/// Saved activations of a fused GRU update.
struct GruCache {
    gi: Var,
    gh: Var,
    h: Var,
    mask: Option<Vec<f32>>,
    r: Vec<f32>,
    z: Vec<f32>,
    n: Vec<f32>,
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// A tape of eagerly evaluated operations.
///
/// Gradients are computed once per tape: a second [`Graph::backward`] is
/// rejected until [`Graph::zero_grad`] clears the previous result.
pub struct Graph<'s> {
    store: Option<&'s ParameterStore>,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
    grad_enabled: bool,
}

/// Gradients of a loss with respect to stored parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Vec<f32>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.grads.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.grads.retain(|&k, _| keep(k));
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn value_of<'a>(nodes: &'a [Node], store: Option<&'a ParameterStore>, v: Var) -> &'a Tensor {
    match &nodes[v.0].value {
        Value::Owned(t) => t,
        Value::Param(id) => store.expect("param node without store").get(*id),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Graph<'s> {
    /// A training tape over `store`: parameters require gradients.
    pub fn new(store: &'s ParameterStore) -> Self {
        Self::build(Some(store), true)
    }

    /// A forward-only tape over `store`; nothing records for backward.
    pub fn inference(store: &'s ParameterStore) -> Self {
        Self::build(Some(store), false)
    }

    /// A tape with no parameter store, for free-standing computations.
    pub fn standalone() -> Graph<'static> {
        Graph::build(None, true)
    }

    fn build(store: Option<&'s ParameterStore>, grad_enabled: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            grads: Vec::new(),
            backward_done: false,
            grad_enabled,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        value_of(&self.nodes, self.store, v)
    }

    /// The stored value of parameter `id`.
    pub fn param_value(&self, id: ParamId) -> &Tensor {
        self.store.expect("tape has no parameter store").get(id)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free-standing leaf that receives a gradient (test and probe use).
    pub fn variable(&mut self, t: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// The stored parameter `id`, referenced without copying. Repeated calls
    /// return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "Graph::param on a tape without a parameter store");
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: self.grad_enabled });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Constant draws from N(0, std²).
    pub fn random_normal(&mut self, shape: impl Into<Vec<usize>>, std: f32, rng: &mut SeededEngine) -> Var {
        let shape = shape.into();
        let n = shape.iter().product();
        let t = Tensor::new(shape, rng.normal_vec(n, std)).expect("positive extents");
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias row (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(x, &b)| *x += b);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Scales row `r` of `a` by `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (r, c) = (ta.rows(), ta.cols());
        if tc.len() != r {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for (row, &s) in data.chunks_mut(c).zip(tc.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulCol(a, col), &[a, col]))
    }

    /// `scale·a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f32, shift: f32) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Affine(a, scale), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(first).rows();
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != rows {
                return Err(mismatch("concat_cols", self.value(first), tp));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if width == 0 || start + width > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for shape {:?}", start + width, ta.shape()),
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + width]);
        }
        let t = Tensor::matrix(rows, width, data)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f32::tanh)?;
        Ok(self.push(t, Op::Tanh(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid)?;
        Ok(self.push(t, Op::Sigmoid(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0))?;
        Ok(self.push(t, Op::Relu(a), &[a]))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&x) = self.value(a).data().iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
            return Err(TensorError::InvalidArgument { op: "log", msg: format!("non-positive input {x}") });
        }
        let t = self.map(a, f32::ln)?;
        Ok(self.push(t, Op::Log(a), &[a]))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        let t = self.map(a, |x| x.clamp(lo, hi))?;
        Ok(self.push(t, Op::Clamp(a, lo, hi), &[a]))
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).is_finite() {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument { op, msg: "non-finite input".into() })
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&x| ((x - m) as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|&e| (e / z) as f32));
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|&x| (x as f64 - lse) as f32));
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::LogSoftmax(a), &[a]))
    }

    /// Rows of `table` selected by `indices`, shape `len × cols`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = (tt.rows(), tt.cols());
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument { op: "embedding", msg: "no indices".into() });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("index {bad} out of range for table of {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(indices.len(), d, data)?;
        Ok(self.push(t, Op::Embedding(table, indices.to_vec()), &[table]))
    }

    /// Per-row cross-entropy of `logits` against class `targets`, shape `rows × 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite("cross_entropy", logits)?;
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} targets for {r} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for {c} classes"),
            });
        }
        let mut losses = Vec::with_capacity(r);
        let mut probs = Vec::with_capacity(r * c);
        for (row, &t) in tl.data().chunks(c).zip(targets) {
            let lse = log_sum_exp(row);
            losses.push((lse - row[t] as f64) as f32);
            probs.extend(row.iter().map(|&x| (x as f64 - lse).exp() as f32));
        }
        let t = Tensor::column(losses)?;
        Ok(self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// `out[r] = a[r, indices[r]]`, shape `rows × 1`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if indices.len() != r || indices.iter().any(|&i| i >= c) {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                msg: format!("indices {indices:?} do not select one column per row of {:?}", ta.shape()),
            });
        }
        let data = indices.iter().enumerate().map(|(row, &i)| ta.data()[row * c + i]).collect();
        let t = Tensor::column(data)?;
        Ok(self.push(t, Op::Pick(a, indices.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().map(|&x| x as f64).sum::<f64>() / ta.len() as f64;
        Ok(self.push(Tensor::scalar(s as f32), Op::Mean(a), &[a]))
    }

    /// `Σ_k weights[k]·a[k]` over the flattened values of `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f32]) -> Result<Var> {
        let ta = self.value(a);
        if weights.len() != ta.len() {
            return Err(TensorError::InvalidArgument {
                op: "weighted_sum",
                msg: format!("{} weights for shape {:?}", weights.len(), ta.shape()),
            });
        }
        let s: f64 = ta.data().iter().zip(weights).map(|(&x, &w)| x as f64 * w as f64).sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::WeightedSum(a, weights.to_vec()), &[a]))
    }

    /// Fused gated-recurrent-unit update.
    ///
    /// `gi = x·W_i + b_i` and `gh = h·W_h + b_h` carry three column blocks
    /// each, ordered reset | update | candidate:
    ///
    /// ```text
    /// r  = σ(gi_r + gh_r)
    /// z  = σ(gi_z + gh_z)
    /// n  = tanh(gi_n + r ⊙ gh_n)
    /// h' = (1 − z) ⊙ n + z ⊙ h
    /// ```
    ///
    /// With a row mask, rows where `mask = 0` keep `h` unchanged.
    pub fn gru_update(&mut self, gi: Var, gh: Var, h: Var, mask: Option<&[f32]>) -> Result<Var> {
        let (tgi, tgh, th) = (self.value(gi), self.value(gh), self.value(h));
        let (b, hid) = (th.rows(), th.cols());
        if tgi.shape() != tgh.shape() || tgi.rows() != b || tgi.cols() != 3 * hid {
            return Err(mismatch("gru_update", tgi, th));
        }
        if tgh.shape() != tgi.shape() {
            return Err(mismatch("gru_update", tgi, tgh));
        }
        if let Some(m) = mask {
            if m.len() != b {
                return Err(TensorError::InvalidArgument {
                    op: "gru_update",
                    msg: format!("mask of length {} for {b} rows", m.len()),
                });
            }
        }
        let mut r = vec![0.0; b * hid];
        let mut z = vec![0.0; b * hid];
        let mut n = vec![0.0; b * hid];
        let mut out = vec![0.0; b * hid];
        for row in 0..b {
            let gi_row = tgi.row(row);
            let gh_row = tgh.row(row);
            let h_row = th.row(row);
            let keep = mask.map_or(1.0, |m| m[row]);
            for j in 0..hid {
                let k = row * hid + j;
                let rr = sigmoid(gi_row[j] + gh_row[j]);
                let zz = sigmoid(gi_row[hid + j] + gh_row[hid + j]);
                let nn = (gi_row[2 * hid + j] + rr * gh_row[2 * hid + j]).tanh();
                let updated = (1.0 - zz) * nn + zz * h_row[j];
                r[k] = rr;
                z[k] = zz;
                n[k] = nn;
                out[k] = keep * updated + (1.0 - keep) * h_row[j];
            }
        }
        let t = Tensor::matrix(b, hid, out)?;
        let cache = GruCache { gi, gh, h, mask: mask.map(<[f32]>::to_vec), r, z, n };
        Ok(self.push(t, Op::Gru(cache), &[gi, gh, h]))
    }

    /// Clears computed gradients so the tape can be differentiated again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if loss.0 >= self.nodes.len() || !self.nodes[loss.0].requires_grad {
            return Err(TensorError::NotOnTape);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            propagate(&self.nodes, self.store, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradients of the last backward pass for every parameter on the tape
    /// that the loss reached.
    pub fn param_grads(&self) -> ParamGrads {
        let grads = self
            .param_nodes
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.to_vec())))
            .collect();
        ParamGrads { grads }
    }
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln()
}

/// Adds the contribution `f` into the gradient slot of `v`, allocating it on
/// first touch. Nodes that do not require gradients are skipped.
fn accumulate(
    nodes: &[Node],
    store: Option<&ParameterStore>,
    grads: &mut [Option<Vec<f32>>],
    v: Var,
    f: impl FnOnce(&mut [f32]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; value_of(nodes, store, v).len()]);
    f(slot);
}

fn propagate(nodes: &[Node], store: Option<&ParameterStore>, grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    let out = value_of(nodes, store, Var(i));
    let val = |v: Var| value_of(nodes, store, v);
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            accumulate(nodes, store, grads, *a, |ga| gemm(m, n, k, g, false, tb.data(), true, ga, 1.0));
            accumulate(nodes, store, grads, *b, |gb| gemm(k, m, n, ta.data(), true, g, false, gb, 1.0));
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                accumulate(nodes, store, grads, *v, |gv| gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, store, grads, *a, |gv| gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            accumulate(nodes, store, grads, *b, |gv| gv.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            accumulate(nodes, store, grads, *a, |gv| {
                gv.iter_mut().zip(g).zip(tb.data()).for_each(|((x, &y), &o)| *x += y * o)
            });
            accumulate(nodes, store, grads, *b, |gv| {
                gv.iter_mut().zip(g).zip(ta.data()).for_each(|((x, &y), &o)| *x += y * o)
            });
        }
        Op::AddRow(a, bias) => {
            let c = out.cols();
            accumulate(nodes, store, grads, *a, |gv| gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            accumulate(nodes, store, grads, *bias, |gb| {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
            });
        }
        Op::MulCol(a, col) => {
            let (ta, tc) = (val(*a), val(*col));
            let c = ta.cols();
            accumulate(nodes, store, grads, *a, |gv| {
                for ((grow, orow), &s) in gv.chunks_mut(c).zip(g.chunks(c)).zip(tc.data()) {
                    grow.iter_mut().zip(orow).for_each(|(x, &y)| *x += y * s);
                }
            });
            accumulate(nodes, store, grads, *col, |gc| {
                for ((x, orow), arow) in gc.iter_mut().zip(g.chunks(c)).zip(ta.data().chunks(c)) {
                    *x += orow.iter().zip(arow).map(|(&y, &v)| y * v).sum::<f32>();
                }
            });
        }
        Op::Affine(a, s) => {
            accumulate(nodes, store, grads, *a, |gv| gv.iter_mut().zip(g).for_each(|(x, &y)| *x += s * y));
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = val(*p).cols();
                accumulate(nodes, store, grads, *p, |gp| {
                    for (grow, orow) in gp.chunks_mut(w).zip(g.chunks(total)) {
                        grow.iter_mut().zip(&orow[offset..offset + w]).for_each(|(x, &y)| *x += y);
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let (w, c) = (out.cols(), val(*a).cols());
            accumulate(nodes, store, grads, *a, |ga| {
                for (grow, orow) in ga.chunks_mut(c).zip(g.chunks(w)) {
                    grow[*start..*start + w].iter_mut().zip(orow).for_each(|(x, &y)| *x += y);
                }
            });
        }
        Op::Tanh(a) => {
            accumulate(nodes, store, grads, *a, |ga| {
                ga.iter_mut().zip(g).zip(out.data()).for_each(|((x, &y), &o)| *x += y * (1.0 - o * o))
            });
        }
        Op::Sigmoid(a) => {
            accumulate(nodes, store, grads, *a, |ga| {
                ga.iter_mut().zip(g).zip(out.data()).for_each(|((x, &y), &o)| *x += y * o * (1.0 - o))
            });
        }
        Op::Relu(a) => {
            let ta = val(*a);
            accumulate(nodes, store, grads, *a, |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(ta.data())
                    .for_each(|((x, &y), &v)| *x += if v > 0.0 { y } else { 0.0 })
            });
        }
        Op::Log(a) => {
            let ta = val(*a);
            accumulate(nodes, store, grads, *a, |ga| {
                ga.iter_mut().zip(g).zip(ta.data()).for_each(|((x, &y), &v)| *x += y / v)
            });
        }
        Op::Clamp(a, lo, hi) => {
            let ta = val(*a);
            accumulate(nodes, store, grads, *a, |ga| {
                ga.iter_mut().zip(g).zip(ta.data()).for_each(|((x, &y), &v)| {
                    if v >= *lo && v <= *hi {
                        *x += y
                    }
                })
            });
        }
        Op::Softmax(a) => {
            let c = out.cols();
            accumulate(nodes, store, grads, *a, |ga| {
                for ((grow, orow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f32 = orow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                    for ((x, &d), &y) in grow.iter_mut().zip(orow).zip(yrow) {
                        *x += y * (d - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            accumulate(nodes, store, grads, *a, |ga| {
                for ((grow, orow), lrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let total: f32 = orow.iter().sum();
                    for ((x, &d), &l) in grow.iter_mut().zip(orow).zip(lrow) {
                        *x += d - l.exp() * total;
                    }
                }
            });
        }
        Op::Embedding(table, indices) => {
            let d = out.cols();
            accumulate(nodes, store, grads, *table, |gt| {
                for (&idx, orow) in indices.iter().zip(g.chunks(d)) {
                    gt[idx * d..(idx + 1) * d].iter_mut().zip(orow).for_each(|(x, &y)| *x += y);
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = val(*logits).cols();
            accumulate(nodes, store, grads, *logits, |gl| {
                for (((grow, prow), &t), &y) in gl.chunks_mut(c).zip(probs.chunks(c)).zip(targets).zip(g) {
                    for (x, &p) in grow.iter_mut().zip(prow) {
                        *x += y * p;
                    }
                    grow[t] -= y;
                }
            });
        }
        Op::Pick(a, indices) => {
            let c = val(*a).cols();
            accumulate(nodes, store, grads, *a, |ga| {
                for (row, (&idx, &y)) in indices.iter().zip(g).enumerate() {
                    ga[row * c + idx] += y;
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, store, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f32;
            accumulate(nodes, store, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::WeightedSum(a, w) => {
            accumulate(nodes, store, grads, *a, |ga| {
                ga.iter_mut().zip(w).for_each(|(x, &wk)| *x += g[0] * wk)
            });
        }
        Op::Gru(cache) => gru_backward(nodes, store, grads, cache, g),
    }
}

fn gru_backward(
    nodes: &[Node],
    store: Option<&ParameterStore>,
    grads: &mut [Option<Vec<f32>>],
    cache: &GruCache,
    g: &[f32],
) {
    let th = value_of(nodes, store, cache.h);
    let tgh = value_of(nodes, store, cache.gh);
    let (b, hid) = (th.rows(), th.cols());
    let mut d_gates = vec![0.0f32; b * 3 * hid];
    let mut d_gh_gates = vec![0.0f32; b * 3 * hid];
    let mut d_h = vec![0.0f32; b * hid];
    for row in 0..b {
        let keep = cache.mask.as_ref().map_or(1.0, |m| m[row]);
        for j in 0..hid {
            let k = row * hid + j;
            let go = g[k];
            let gm = go * keep;
            let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
            let h = th.data()[k];
            let gh_n = tgh.data()[row * 3 * hid + 2 * hid + j];
            let dn = gm * (1.0 - z);
            let dz = gm * (h - n);
            let da_n = dn * (1.0 - n * n);
            let dr = da_n * gh_n;
            let da_z = dz * z * (1.0 - z);
            let da_r = dr * r * (1.0 - r);
            let base = row * 3 * hid;
            d_gates[base + j] = da_r;
            d_gates[base + hid + j] = da_z;
            d_gates[base + 2 * hid + j] = da_n;
            d_gh_gates[base + j] = da_r;
            d_gh_gates[base + hid + j] = da_z;
            d_gh_gates[base + 2 * hid + j] = da_n * r;
            d_h[k] = gm * z + go * (1.0 - keep);
        }
    }
    accumulate(nodes, store, grads, cache.gi, |x| x.iter_mut().zip(&d_gates).for_each(|(a, &b)| *a += b));
    accumulate(nodes, store, grads, cache.gh, |x| x.iter_mut().zip(&d_gh_gates).for_each(|(a, &b)| *a += b));
    accumulate(nodes, store, grads, cache.h, |x| x.iter_mut().zip(&d_h).for_each(|(a, &b)| *a += b));
}
