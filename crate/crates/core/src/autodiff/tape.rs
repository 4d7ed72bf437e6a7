use crate::error::{shape_err, Error, Result};

use super::{ParamId, ParamStore, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head self-attention call.
///
/// Rows of the `q`/`k`/`v` inputs are laid out example-major: row
/// `b * seq + t` is position `t` of example `b`. Keys whose `key_mask` entry
/// is `false` receive zero attention weight.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) | Op::AddRow(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::LayerNorm { .. } => "layernorm",
            Op::Embed { .. } => "embed_lookup",
            Op::GatherRows { .. } => "gather_rows",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every op pushes exactly one node whose inputs were pushed earlier, so the
/// node order is a topological order and [`Tape::backward`] is a single
/// reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&c, rest)) => (rest.iter().product(), c),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("expected scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced {} at flat index {pos}",
                op.name(),
                value[pos]
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as an input; it is differentiated iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a parameter; gradients flow back into `store` on backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of
    /// `a`, in which case it is broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
            return self.push(sa, out, Op::Add(a, b), rg);
        }
        let (_, cols) = rows_cols(&sa);
        if sb.len() == 1 && sb[0] == cols && !sa.is_empty() {
            let bias = self.value(b);
            let out = self
                .value(a)
                .chunks_exact(cols)
                .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
                .collect();
            return self.push(sa, out, Op::AddRow(a, b), rg);
        }
        Err(shape_err("add", &sa, sb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa != sb {
            return Err(shape_err("sub", &sa, sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        self.push(sa, out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", &sa, sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        self.push(sa, out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Exp(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_cols(&shape);
        let mut out = self.value(a).to_vec();
        if cols > 0 {
            out.chunks_exact_mut(cols).for_each(softmax_in_place);
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Row-wise log-sum-exp over the last axis; drops that axis.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(shape_err("logsumexp", &shape, &[]));
        }
        let out = self.value(a).chunks_exact(cols).map(log_sum_exp).collect();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let rg = self.rg(&[a]);
        self.push(out_shape, out, Op::LogSumExp(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` over the
    /// last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(shape_err("layernorm", &shape, self.shape(p)));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::from_usize(cols).expect("usize fits");
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).chunks_exact(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Selects rows `ids` of a `[V, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(shape_err("embed_lookup", shape, &[ids.len()]));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocab { id, size: vocab });
        }
        let src = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Selects rows of `x` viewed as a `[rows, cols]` matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = rows_cols(self.shape(x));
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", self.shape(x), &[r]));
        }
        let src = self.value(x);
        let out = rows
            .iter()
            .flat_map(|&r| src[r * cols..(r + 1) * cols].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            vec![rows.len(), cols],
            out,
            Op::GatherRows { x, rows: rows.to_vec() },
            rg,
        )
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(*first).is_empty() {
            return Err(shape_err("concat", &[], &[]));
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push(shape, out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape.to_vec(), out, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean", self.shape(a), &[]));
        }
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len()).expect("usize fits");
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Mean squared error, averaged over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || self.value(a).is_empty() {
            return Err(shape_err("mse", sa, sb));
        }
        let n = T::from_usize(self.value(a).len()).expect("usize fits");
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(&[a, b]);
        self.push(Vec::new(), vec![s], Op::Mse(a, b), rg)
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class ids,
    /// computed in log-softmax form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
            return Err(shape_err("cross_entropy", shape, &[labels.len()]));
        }
        let k = shape[1];
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, (&y, p)) in self
            .value(logits)
            .chunks_exact(k)
            .zip(labels.iter().zip(probs.chunks_exact_mut(k)))
        {
            total += log_sum_exp(row) - row[y];
            softmax_in_place(p);
        }
        let loss = total / T::from_usize(labels.len()).expect("usize fits");
        let rg = self.rg(&[logits]);
        self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Scaled dot-product multi-head self-attention over pre-projected
    /// `q`, `k`, `v` of shape `[batch * seq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttentionGeometry) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err("attention", &shape, self.shape(k)));
        }
        let (rows, d) = rows_cols(&shape);
        if shape.len() != 2
            || rows != geom.batch * geom.seq
            || geom.key_mask.len() != rows
            || geom.heads == 0
            || d % geom.heads != 0
        {
            return Err(shape_err(
                "attention",
                &shape,
                &[geom.batch, geom.seq, geom.heads, geom.key_mask.len()],
            ));
        }
        let (s, h) = (geom.seq, geom.heads);
        let dh = d / h;
        let inv = T::one() / T::from_usize(dh).expect("usize fits").sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); geom.batch * h * s * s];
        let mut out = vec![T::zero(); rows * d];
        let mut scores = vec![T::zero(); s];
        for b in 0..geom.batch {
            let mask = &geom.key_mask[b * s..(b + 1) * s];
            if !mask.iter().any(|&m| m) {
                return Err(Error::Contract(format!("example {b} has no unmasked key")));
            }
            for head in 0..h {
                let off = head * dh;
                for i in 0..s {
                    let qi = &qv[(b * s + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in (0..s).filter(|&j| mask[j]) {
                        let kj = &kv[(b * s + j) * d + off..][..dh];
                        let dot = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * inv;
                        scores[j] = dot;
                        max = max.max(dot);
                    }
                    let p = &mut probs[((b * h + head) * s + i) * s..][..s];
                    let mut z = T::zero();
                    for j in (0..s).filter(|&j| mask[j]) {
                        p[j] = (scores[j] - max).exp();
                        z += p[j];
                    }
                    let o = &mut out[(b * s + i) * d + off..][..dh];
                    for j in (0..s).filter(|&j| mask[j]) {
                        p[j] /= z;
                        let vj = &vv[(b * s + j) * d + off..][..dh];
                        o.iter_mut().zip(vj).for_each(|(acc, &x)| *acc += p[j] * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(shape, out, Op::Attention { q, k, v, geom, probs }, rg)
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Gradients of tape nodes are recomputed from scratch on every call;
    /// parameter gradients are added to `store`, so repeated calls without
    /// [`ParamStore::zero_grad`] accumulate.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "gradient of parameter {} is not finite",
                        store.name(*id)
                    )));
                }
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        // Inputs always precede `i`, so they can be borrowed from the
        // prefix while the node itself is read from the suffix.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let grads = &mut self.grads;
        let want = |v: Var| before[v.0].requires_grad;
        macro_rules! buf {
            ($v:expr) => {
                accumulate(&mut grads[$v.0], before[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&before[a.0].shape, &before[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(a) {
                    // dA = dC · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        &before[b.0].value,
                        (1, n as isize),
                        T::one(),
                        buf!(a),
                    );
                }
                if want(b) {
                    // dB = Aᵀ · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        &before[a.0].value,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        buf!(b),
                    );
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if want(v) {
                        buf!(v).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if want(a) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if want(b) {
                    let gb = buf!(b);
                    let cols = gb.len();
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if want(a) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if want(b) {
                    buf!(b).iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    let other = &before[b.0].value;
                    buf!(a)
                        .iter_mut()
                        .zip(g.iter().zip(other))
                        .for_each(|(x, (&gy, &o))| *x += gy * o);
                }
                if want(b) {
                    let other = &before[a.0].value;
                    buf!(b)
                        .iter_mut()
                        .zip(g.iter().zip(other))
                        .for_each(|(x, (&gy, &o))| *x += gy * o);
                }
            }
            &Op::Scale(a, c) => {
                if want(a) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if want(a) {
                    buf!(a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            &Op::Exp(a) => {
                if want(a) {
                    buf!(a)
                        .iter_mut()
                        .zip(g.iter().zip(&node.value))
                        .for_each(|(x, (&gy, &y))| *x += gy * y);
                }
            }
            &Op::Tanh(a) => {
                if want(a) {
                    buf!(a)
                        .iter_mut()
                        .zip(g.iter().zip(&node.value))
                        .for_each(|(x, (&gy, &y))| *x += gy * (T::one() - y * y));
                }
            }
            &Op::Gelu(a) => {
                if want(a) {
                    let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    buf!(a)
                        .iter_mut()
                        .zip(g.iter().zip(&before[a.0].value))
                        .for_each(|(acc, (&gy, &x))| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let du = c * (T::one() + three * k * x * x);
                            let d = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                            *acc += gy * d;
                        });
                }
            }
            &Op::Softmax(a) => {
                if want(a) {
                    let cols = rows_cols(&node.shape).1;
                    let ga = buf!(a);
                    for ((gr, yr), out) in g
                        .chunks_exact(cols)
                        .zip(node.value.chunks_exact(cols))
                        .zip(ga.chunks_exact_mut(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        out.iter_mut()
                            .zip(gr.iter().zip(yr))
                            .for_each(|(o, (&gy, &y))| *o += y * (gy - dot));
                    }
                }
            }
            &Op::LogSumExp(a) => {
                if want(a) {
                    let cols = rows_cols(&before[a.0].shape).1;
                    let x = &before[a.0].value;
                    let ga = buf!(a);
                    for (r, (xr, out)) in x.chunks_exact(cols).zip(ga.chunks_exact_mut(cols)).enumerate() {
                        let lse = node.value[r];
                        out.iter_mut()
                            .zip(xr)
                            .for_each(|(o, &xv)| *o += g[r] * (xv - lse).exp());
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = rows_cols(&node.shape).1;
                let n = T::from_usize(cols).expect("usize fits");
                if want(*gamma) {
                    let gg = buf!(*gamma);
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        gg.iter_mut()
                            .zip(gr.iter().zip(hr))
                            .for_each(|(o, (&gy, &h))| *o += gy * h);
                    }
                }
                if want(*beta) {
                    let gb = buf!(*beta);
                    for gr in g.chunks_exact(cols) {
                        gb.iter_mut().zip(gr).for_each(|(o, &gy)| *o += gy);
                    }
                }
                if want(*x) {
                    let gamma_v = &before[gamma.0].value;
                    let gx = buf!(*x);
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, ((gr, hr), out)) in g
                        .chunks_exact(cols)
                        .zip(xhat.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                        .enumerate()
                    {
                        dxhat
                            .iter_mut()
                            .zip(gr.iter().zip(gamma_v))
                            .for_each(|(d, (&gy, &gm))| *d = gy * gm);
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dh = dxhat.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / n;
                        out.iter_mut()
                            .zip(dxhat.iter().zip(hr))
                            .for_each(|(o, (&d, &h))| *o += rstd[r] * (d - mean_d - h * mean_dh));
                    }
                }
            }
            Op::Embed { table: src, ids } | Op::GatherRows { x: src, rows: ids } => {
                if want(*src) {
                    let cols = rows_cols(&node.shape).1;
                    let gt = buf!(*src);
                    for (&id, gr) in ids.iter().zip(g.chunks_exact(cols)) {
                        gt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(o, &gy)| *o += gy);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = before[p.0].value.len();
                    if want(p) {
                        buf!(p).iter_mut().zip(&g[off..off + len]).for_each(|(o, &gy)| *o += gy);
                    }
                    off += len;
                }
            }
            &Op::Sum(a) => {
                if want(a) {
                    buf!(a).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::Mean(a) => {
                if want(a) {
                    let ga = buf!(a);
                    let d = g[0] / T::from_usize(ga.len()).expect("usize fits");
                    ga.iter_mut().for_each(|o| *o += d);
                }
            }
            &Op::Mse(a, b) => {
                let (va, vb) = (&before[a.0].value, &before[b.0].value);
                let c = T::of(2.0) * g[0] / T::from_usize(va.len()).expect("usize fits");
                if want(a) {
                    buf!(a)
                        .iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(o, (&x, &y))| *o += c * (x - y));
                }
                if want(b) {
                    buf!(b)
                        .iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(o, (&x, &y))| *o -= c * (x - y));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if want(*logits) {
                    let k = probs.len() / labels.len();
                    let c = g[0] / T::from_usize(labels.len()).expect("usize fits");
                    let gl = buf!(*logits);
                    for ((out, p), &y) in gl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(labels) {
                        for (j, (o, &pj)) in out.iter_mut().zip(p).enumerate() {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            *o += c * (pj - onehot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                let d = rows_cols(&node.shape).1;
                let (s, h) = (geom.seq, geom.heads);
                let dh = d / h;
                let inv = T::one() / T::from_usize(dh).expect("usize fits").sqrt();
                let (qv, kv, vv) = (&before[q.0].value, &before[k.0].value, &before[v.0].value);
                let rows = geom.batch * s;
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); s];
                for b in 0..geom.batch {
                    let mask = &geom.key_mask[b * s..(b + 1) * s];
                    for head in 0..h {
                        let off = head * dh;
                        for i in 0..s {
                            let p = &probs[((b * h + head) * s + i) * s..][..s];
                            let gi = &g[(b * s + i) * d + off..][..dh];
                            let mut dot = T::zero();
                            for j in (0..s).filter(|&j| mask[j]) {
                                let vj = &vv[(b * s + j) * d + off..][..dh];
                                dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                                dot += p[j] * dp[j];
                                dv[(b * s + j) * d + off..][..dh]
                                    .iter_mut()
                                    .zip(gi)
                                    .for_each(|(o, &x)| *o += p[j] * x);
                            }
                            let qi = &qv[(b * s + i) * d + off..][..dh];
                            for j in (0..s).filter(|&j| mask[j]) {
                                let ds = p[j] * (dp[j] - dot) * inv;
                                let kj = &kv[(b * s + j) * d + off..][..dh];
                                dq[(b * s + i) * d + off..][..dh]
                                    .iter_mut()
                                    .zip(kj)
                                    .for_each(|(o, &x)| *o += ds * x);
                                dk[(b * s + j) * d + off..][..dh]
                                    .iter_mut()
                                    .zip(qi)
                                    .for_each(|(o, &x)| *o += ds * x);
                            }
                        }
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if want(var) {
                        buf!(var).iter_mut().zip(&grad).for_each(|(o, &x)| *o += x);
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max.is_infinite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
