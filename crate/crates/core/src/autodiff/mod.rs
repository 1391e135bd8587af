//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. [`Tape::backward`] walks the nodes in
//! exact reverse order and accumulates gradients into every node that
//! requires one. A tape is single-use: build a fresh one per forward pass.
//!
//! The JumpReLU gate lives here because its threshold gradient is a custom
//! straight-through rule rather than the (zero almost everywhere) true
//! derivative.

mod nn;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

pub(crate) use nn::AttentionShape;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unit step with `H(0) = 0`.
#[inline]
pub fn heaviside_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Threshold pseudo-derivative of `JumpReLU_τ` at `x` for bandwidth `ε`:
/// `−(τ/ε)·[H((x−τ)/ε + ½) − H((x−τ)/ε − ½)]`, i.e. `−τ/ε` when
/// `(x−τ)/ε ∈ (−½, ½]` and zero elsewhere.
#[inline]
pub fn jumprelu_tau_pseudo_grad<T: Scalar>(x: T, tau: T, eps: T) -> T {
    let half = T::of(0.5);
    let u = (x - tau) / eps;
    let window = heaviside_scalar(u + half) - heaviside_scalar(u - half);
    -(tau / eps) * window
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    /// Output carries no gradient.
    Heaviside,
    JumpRelu {
        x: Var,
        tau: Var,
        eps: T,
    },
    FrobeniusSq(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: nn::LayerNormCache<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        groups: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// An ordered record of executed differentiable operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    visit_order: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            visit_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if one
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).expect("grad shape"))
    }

    /// Node indices in the order the last backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        let rg = self.rg(x);
        self.push(out, rg, Op::Neg(x))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, factor))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "bias of {} values for {m}x{n} rows",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::AddRowBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    /// Elementwise unit step, `0` for `x ≤ 0` and `1` for `x > 0`. No
    /// gradient flows through it.
    pub fn heaviside(&mut self, x: Var) -> Var {
        let out = self.value(x).map(heaviside_scalar);
        self.push(out, false, Op::Heaviside)
    }

    /// `x ⊙ H(x − τ)` for a one-element threshold `tau`.
    ///
    /// Backward: the input receives `g ⊙ H(x − τ)`; the threshold receives
    /// `Σ g ⊙ ψ(x, τ, ε)` with ψ from [`jumprelu_tau_pseudo_grad`].
    pub fn jumprelu(&mut self, x: Var, tau: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Config(format!("JumpReLU bandwidth must be positive, got {eps}")));
        }
        if !self.value(tau).is_scalar() {
            return Err(Error::Dimension(format!(
                "JumpReLU threshold must hold one value, got shape {:?}",
                self.value(tau).shape()
            )));
        }
        let t = self.value(tau).item();
        let out = self.value(x).map(|v| v * heaviside_scalar(v - t));
        let rg = self.rg(x) || self.rg(tau);
        Ok(self.push(out, rg, Op::JumpRelu { x, tau, eps }))
    }

    /// Sum of squared entries, as a one-element tensor.
    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::FrobeniusSq(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Row-wise layer normalization of an `m×n` matrix with learnable gain
    /// and bias of length `n`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension(format!("layer norm parameters must have {n} values")));
        }
        let (y, cache) = nn::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            n,
            eps,
        );
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, y)?, rg, Op::LayerNorm { x, gain, bias, cache }))
    }

    /// Multi-head self-attention. `q`, `k`, `v` are `[batch·seq × d_model]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.value(q).dims2()?;
        if rows != batch * seq {
            return Err(Error::Dimension(format!(
                "attention expects {batch}x{seq} rows, got {rows}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "{d} features do not split into {heads} heads"
            )));
        }
        let shape = AttentionShape {
            batch,
            seq,
            heads,
            d_model: d,
        };
        let (out, probs) =
            nn::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), shape);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(rows, d, out)?,
            rg,
            Op::Attention { q, k, v, shape, probs },
        ))
    }

    /// Gathers rows of a `vocab×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Averages consecutive blocks of rows: `[groups·len × d] → [groups × d]`.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if groups == 0 || rows % groups != 0 {
            return Err(Error::Dimension(format!(
                "{rows} rows do not split into {groups} groups"
            )));
        }
        let len = rows / groups;
        let inv = T::one() / T::of(len as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups * d];
        for g in 0..groups {
            for r in 0..len {
                let row = &src[(g * len + r) * d..(g * len + r + 1) * d];
                for c in 0..d {
                    out[g * d + c] = out[g * d + c] + row[c];
                }
            }
            for c in 0..d {
                out[g * d + c] = out[g * d + c] * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(groups, d, out)?, rg, Op::MeanPool { x, groups }))
    }

    /// Mean softmax cross-entropy of `logits` (`batch × classes`) against
    /// integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if rows != labels.len() {
            return Err(Error::Dimension(format!(
                "{rows} logit rows for {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} outside {classes} classes")));
        }
        let (loss, probs) = nn::cross_entropy_forward(self.value(logits).data(), labels, classes);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, contribution: Vec<T>) {
        if !nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Back-propagates from a one-element `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; record a new forward pass first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Dimension(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.visit_order.clear();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].as_ref() else {
                continue;
            };
            self.visit_order.push(i);
            let g = g.clone();
            let nodes = &self.nodes;
            let grads = &mut self.grads;
            let val = |v: Var| nodes[v.0].value.data();
            match &nodes[i].op {
                Op::Leaf | Op::Heaviside => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if nodes[a.0].requires_grad {
                        // dA = G · Bᵀ
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, &g, (n, 1), val(b), (1, n), &mut da);
                        Self::accumulate(grads, nodes, a, da);
                    }
                    if nodes[b.0].requires_grad {
                        // dB = Aᵀ · G
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, val(a), (1, k), &g, (n, 1), &mut db);
                        Self::accumulate(grads, nodes, b, db);
                    }
                }
                &Op::Add(a, b) => {
                    Self::accumulate(grads, nodes, a, g.clone());
                    Self::accumulate(grads, nodes, b, g);
                }
                &Op::Sub(a, b) => {
                    Self::accumulate(grads, nodes, a, g.clone());
                    Self::accumulate(grads, nodes, b, g.iter().map(|&x| -x).collect());
                }
                &Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let da = g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect();
                        Self::accumulate(grads, nodes, a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let db = g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect();
                        Self::accumulate(grads, nodes, b, db);
                    }
                }
                &Op::Neg(x) => Self::accumulate(grads, nodes, x, g.iter().map(|&v| -v).collect()),
                &Op::Scale(x, f) => Self::accumulate(grads, nodes, x, g.iter().map(|&v| v * f).collect()),
                &Op::AddRowBias { x, bias } => {
                    if nodes[bias.0].requires_grad {
                        let n = nodes[bias.0].value.numel();
                        let mut db = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d = *d + gv;
                            }
                        }
                        Self::accumulate(grads, nodes, bias, db);
                    }
                    Self::accumulate(grads, nodes, x, g);
                }
                &Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(x))
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    Self::accumulate(grads, nodes, x, dx);
                }
                &Op::JumpRelu { x, tau, eps } => {
                    let t = nodes[tau.0].value.item();
                    let xv = val(x);
                    if nodes[x.0].requires_grad {
                        let dx = g.iter().zip(xv).map(|(&gv, &v)| gv * heaviside_scalar(v - t)).collect();
                        Self::accumulate(grads, nodes, x, dx);
                    }
                    if nodes[tau.0].requires_grad {
                        let dtau = g
                            .iter()
                            .zip(xv)
                            .map(|(&gv, &v)| gv * jumprelu_tau_pseudo_grad(v, t, eps))
                            .sum::<T>();
                        Self::accumulate(grads, nodes, tau, vec![dtau]);
                    }
                }
                &Op::FrobeniusSq(x) => {
                    let two_g = T::of(2.0) * g[0];
                    Self::accumulate(grads, nodes, x, val(x).iter().map(|&v| two_g * v).collect());
                }
                &Op::Sum(x) => {
                    let n = nodes[x.0].value.numel();
                    Self::accumulate(grads, nodes, x, vec![g[0]; n]);
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let n = nodes[gain.0].value.numel();
                    let (dx, dgain, dbias) = nn::layer_norm_backward(&g, val(*x), val(*gain), cache, n);
                    Self::accumulate(grads, nodes, *x, dx);
                    Self::accumulate(grads, nodes, *gain, dgain);
                    Self::accumulate(grads, nodes, *bias, dbias);
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) = nn::attention_backward(&g, val(*q), val(*k), val(*v), probs, *shape);
                    Self::accumulate(grads, nodes, *q, dq);
                    Self::accumulate(grads, nodes, *k, dk);
                    Self::accumulate(grads, nodes, *v, dv);
                }
                Op::Embedding { table, ids } => {
                    if nodes[table.0].requires_grad {
                        let d = nodes[table.0].value.shape()[1];
                        let mut dt = vec![T::zero(); nodes[table.0].value.numel()];
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                dt[id * d + c] = dt[id * d + c] + g[r * d + c];
                            }
                        }
                        Self::accumulate(grads, nodes, *table, dt);
                    }
                }
                &Op::MeanPool { x, groups } => {
                    let (rows, d) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let len = rows / groups;
                    let inv = T::one() / T::of(len as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let grp = r / len;
                        for c in 0..d {
                            dx[r * d + c] = g[grp * d + c] * inv;
                        }
                    }
                    Self::accumulate(grads, nodes, x, dx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let classes = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / T::of(labels.len() as f64);
                    let mut dl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        dl[r * classes + label] = dl[r * classes + label] - T::one();
                    }
                    for v in dl.iter_mut() {
                        *v = *v * scale;
                    }
                    Self::accumulate(grads, nodes, *logits, dl);
                }
            }
        }
        Ok(())
    }
}
