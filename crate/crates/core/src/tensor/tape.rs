//! Define-by-run reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! construction order, so an op's inputs always precede it and backward is a
//! single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{log_softmax_row, matmul, matmul_grad_lhs, matmul_grad_rhs, softmax_row};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBroadcast {
        x: usize,
        p: usize,
    },
    MulBroadcast {
        x: usize,
        p: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: F,
    },
    Gelu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        x: usize,
        t: F,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Tile {
        x: usize,
        times: usize,
    },
    ConcatSeq {
        parts: Vec<(usize, usize)>,
        batch: usize,
        dim: usize,
    },
    SliceSeq {
        x: usize,
        seq: usize,
        dim: usize,
        start: usize,
    },
    MeanTokens {
        x: usize,
        seq: usize,
        dim: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    KlDiv {
        p: usize,
        q: usize,
        t: F,
        log_p: Vec<F>,
        log_q: Vec<F>,
        row_kl: Vec<F>,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Cosine {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<F> {
    tape: u64,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, var: Var) -> Option<&[F]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_deref())
    }
}

#[derive(Debug)]
pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sqrt_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).sqrt()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.idx >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} belongs to tape {}, not tape {}",
                var.idx, var.tape, self.id
            )));
        }
        Ok(var.idx)
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, i: usize) -> &Node<F> {
        &self.nodes[i]
    }

    pub fn value(&self, var: Var) -> &[F] {
        &self.nodes[self.idx(var).expect("var from this tape")].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[self.idx(var).expect("var from this tape")].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.idx].needs_grad
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, var: Var) -> F {
        self.value(var)[0]
    }

    pub fn to_tensor(&self, var: Var) -> Tensor<F> {
        let node = &self.nodes[var.idx];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("consistent node")
    }

    /// Saved attention probabilities `[batch × heads × seq × seq]` of an
    /// attention node.
    pub fn attention_probs(&self, var: Var) -> Option<&[F]> {
        match &self.nodes.get(var.idx)?.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => Some((Var { tape: self.id, idx: i }, id)),
            _ => None,
        })
    }

    // ---- leaves -------------------------------------------------------

    /// Records a tensor. It participates in backward iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Var {
        self.push(
            tensor.data().to_vec(),
            tensor.shape().to_vec(),
            Op::Leaf { param: None },
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        )
    }

    // ---- linear algebra -----------------------------------------------

    /// `a[..×k] · b[k×n] → [..×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.node(ai).shape, &self.node(bi).shape);
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.node(ai).value.len() / k.max(1);
        let mut shape = sa.clone();
        *shape.last_mut().expect("non-empty") = n;
        let mut out = vec![F::zero(); m * n];
        matmul(&self.node(ai).value, &self.node(bi).value, m, k, n, &mut out);
        let needs = self.node(ai).needs_grad || self.node(bi).needs_grad;
        Ok(self.push(out, shape, Op::MatMul { a: ai, b: bi, m, k, n }, needs))
    }

    /// `x @ w + b` for `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    fn broadcast_check(&self, xi: usize, pi: usize, op: &'static str) -> Result<()> {
        let (sx, sp) = (&self.node(xi).shape, &self.node(pi).shape);
        if sp.len() > sx.len() || sx[sx.len() - sp.len()..] != sp[..] {
            return Err(Error::dim(op, sx, sp));
        }
        Ok(())
    }

    /// `x + p`, with `p` matching the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xi, pi) = (self.idx(x)?, self.idx(p)?);
        self.broadcast_check(xi, pi, "add_broadcast")?;
        let pv = &self.node(pi).value;
        let per = pv.len();
        let out: Vec<F> = self
            .node(xi)
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + pv[i % per])
            .collect();
        let shape = self.node(xi).shape.clone();
        let needs = self.node(xi).needs_grad || self.node(pi).needs_grad;
        Ok(self.push(out, shape, Op::AddBroadcast { x: xi, p: pi }, needs))
    }

    /// `x ⊙ p`, with `p` matching the trailing axes of `x`.
    pub fn mul_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xi, pi) = (self.idx(x)?, self.idx(p)?);
        self.broadcast_check(xi, pi, "mul_broadcast")?;
        let pv = &self.node(pi).value;
        let per = pv.len();
        let out: Vec<F> = self
            .node(xi)
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v * pv[i % per])
            .collect();
        let shape = self.node(xi).shape.clone();
        let needs = self.node(xi).needs_grad || self.node(pi).needs_grad;
        Ok(self.push(out, shape, Op::MulBroadcast { x: xi, p: pi }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.node(ai).shape != self.node(bi).shape {
            return Err(Error::dim(op, &self.node(ai).shape, &self.node(bi).shape));
        }
        Ok((ai, bi))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(usize, usize, Vec<F>, bool)> {
        let (ai, bi) = self.same_shape(a, b, name)?;
        let out = self
            .node(ai)
            .value
            .iter()
            .zip(&self.node(bi).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.node(ai).needs_grad || self.node(bi).needs_grad;
        Ok((ai, bi, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out, needs) = self.zip_op(a, b, "add", |x, y| x + y)?;
        let shape = self.node(ai).shape.clone();
        Ok(self.push(out, shape, Op::Add { a: ai, b: bi }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out, needs) = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let shape = self.node(ai).shape.clone();
        Ok(self.push(out, shape, Op::Sub { a: ai, b: bi }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out, needs) = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let shape = self.node(ai).shape.clone();
        Ok(self.push(out, shape, Op::Mul { a: ai, b: bi }, needs))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let xi = self.idx(x)?;
        let node = self.node(xi);
        let out = node.value.iter().map(|&v| v * c).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        Ok(self.push(out, shape, Op::Scale { x: xi, c }, needs))
    }

    /// Gaussian error linear unit, exact erf form `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let node = self.node(xi);
        let out = node.value.iter().map(|&v| gelu_scalar(v)).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        Ok(self.push(out, shape, Op::Gelu { x: xi }, needs))
    }

    /// Per-vector standardization over the last axis followed by `γ⊙x̂+β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        if !eps.is_finite() || eps <= F::zero() {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.node(xi).shape.clone();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(Error::dim("layer_norm", &shape, &[]));
        }
        for &pi in &[gi, bi] {
            if self.node(pi).shape != [d] {
                return Err(Error::dim("layer_norm", &shape, &self.node(pi).shape));
            }
        }
        let xv = &self.node(xi).value;
        let (gv, bv) = (&self.node(gi).value, &self.node(bi).value);
        let rows = xv.len() / d;
        let df = F::from_f64(d as f64);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let needs = self.node(xi).needs_grad || self.node(gi).needs_grad || self.node(bi).needs_grad;
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Softmax of `x / t` along the last axis.
    pub fn softmax_t(&mut self, x: Var, t: F) -> Result<Var> {
        let xi = self.idx(x)?;
        check_temperature(t)?;
        let node = self.node(xi);
        let k = node.shape.last().copied().unwrap_or(0);
        if k == 0 {
            return Err(Error::dim("softmax_t", &node.shape, &[]));
        }
        check_finite(&node.value, "softmax_t")?;
        let mut out = vec![F::zero(); node.value.len()];
        for (row, o) in node.value.chunks(k).zip(out.chunks_mut(k)) {
            softmax_row(row, t, o);
        }
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        Ok(self.push(out, shape, Op::Softmax { x: xi, t }, needs))
    }

    /// Multi-head scaled dot-product attention over `[batch × seq × dim]`
    /// projections. Probabilities are kept on the node for inspection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qi, ki) = self.same_shape(q, k, "attention")?;
        let (_, vi) = self.same_shape(q, v, "attention")?;
        let shape = self.node(qi).shape.clone();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(heads) {
            return Err(Error::dim("attention", &shape, &[heads]));
        }
        let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
        let dh = dim / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (&self.node(qi).value, &self.node(ki).value, &self.node(vi).value);
        let mut out = vec![F::zero(); qv.len()];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut scores = vec![F::zero(); seq];
        for b in 0..batch {
            let base = b * seq * dim;
            for h in 0..heads {
                let off = h * dh;
                let pbase = ((b * heads) + h) * seq * seq;
                for i in 0..seq {
                    let qrow = &qv[base + i * dim + off..base + i * dim + off + dh];
                    for j in 0..seq {
                        let krow = &kv[base + j * dim + off..base + j * dim + off + dh];
                        let mut acc = F::zero();
                        for (&a, &c) in qrow.iter().zip(krow) {
                            acc += a * c;
                        }
                        scores[j] = acc * scale;
                    }
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    softmax_row(&scores, F::one(), prow);
                    let orow = &mut out[base + i * dim + off..base + i * dim + off + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vv[base + j * dim + off..base + j * dim + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let needs = self.node(qi).needs_grad || self.node(ki).needs_grad || self.node(vi).needs_grad;
        Ok(self.push(
            out,
            shape,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    // ---- sequence plumbing --------------------------------------------

    /// Repeats `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let node = self.node(xi);
        let mut out = Vec::with_capacity(node.value.len() * times);
        for _ in 0..times {
            out.extend_from_slice(&node.value);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(&node.shape);
        let needs = node.needs_grad;
        Ok(self.push(out, shape, Op::Tile { x: xi, times }, needs))
    }

    /// Concatenates `[batch × s_i × dim]` tensors along the sequence axis.
    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.idx(*parts.first().ok_or_else(|| Error::Tape("empty concat".into()))?)?;
        let s0 = self.node(first).shape.clone();
        if s0.len() != 3 {
            return Err(Error::dim("concat_seq", &s0, &[]));
        }
        let (batch, dim) = (s0[0], s0[2]);
        let mut idxs = Vec::with_capacity(parts.len());
        for &p in parts {
            let pi = self.idx(p)?;
            let sp = &self.node(pi).shape;
            if sp.len() != 3 || sp[0] != batch || sp[2] != dim {
                return Err(Error::dim("concat_seq", &s0, sp));
            }
            idxs.push((pi, sp[1]));
        }
        let total: usize = idxs.iter().map(|&(_, s)| s).sum();
        let mut out = Vec::with_capacity(batch * total * dim);
        for b in 0..batch {
            for &(pi, s) in &idxs {
                out.extend_from_slice(&self.node(pi).value[b * s * dim..(b + 1) * s * dim]);
            }
        }
        let needs = idxs.iter().any(|&(pi, _)| self.node(pi).needs_grad);
        Ok(self.push(
            out,
            vec![batch, total, dim],
            Op::ConcatSeq {
                parts: idxs,
                batch,
                dim,
            },
            needs,
        ))
    }

    /// Positions `start..start+len` of a `[batch × seq × dim]` tensor.
    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.node(xi).shape.clone();
        if shape.len() != 3 || start + len > shape[1] {
            return Err(Error::dim("slice_seq", &shape, &[start, len]));
        }
        let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
        let xv = &self.node(xi).value;
        let mut out = Vec::with_capacity(batch * len * dim);
        for b in 0..batch {
            let from = (b * seq + start) * dim;
            out.extend_from_slice(&xv[from..from + len * dim]);
        }
        let needs = self.node(xi).needs_grad;
        Ok(self.push(
            out,
            vec![batch, len, dim],
            Op::SliceSeq { x: xi, seq, dim, start },
            needs,
        ))
    }

    /// Mean over positions `start..start+len`, giving `[batch × dim]`.
    pub fn mean_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.node(xi).shape.clone();
        if shape.len() != 3 || len == 0 || start + len > shape[1] {
            return Err(Error::dim("mean_tokens", &shape, &[start, len]));
        }
        let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
        let xv = &self.node(xi).value;
        let mut out = vec![F::zero(); batch * dim];
        let inv = F::from_f64(1.0 / len as f64);
        for b in 0..batch {
            let orow = &mut out[b * dim..(b + 1) * dim];
            for s in start..start + len {
                let from = (b * seq + s) * dim;
                for (o, &v) in orow.iter_mut().zip(&xv[from..from + dim]) {
                    *o += v;
                }
            }
            if len > 1 {
                orow.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let needs = self.node(xi).needs_grad;
        Ok(self.push(
            out,
            vec![batch, dim],
            Op::MeanTokens {
                x: xi,
                seq,
                dim,
                start,
                len,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = shape.into();
        let node = self.node(xi);
        if shape.iter().product::<usize>() != node.value.len() {
            return Err(Error::dim("reshape", &node.shape, &shape));
        }
        let (out, needs) = (node.value.clone(), node.needs_grad);
        Ok(self.push(out, shape, Op::Reshape { x: xi }, needs))
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let node = self.node(xi);
        let s = node.value.iter().copied().sum::<F>();
        let needs = node.needs_grad;
        Ok(self.push(vec![s], vec![1], Op::Sum { x: xi }, needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let node = self.node(xi);
        if node.value.is_empty() {
            return Err(Error::dim("mean", &node.shape, &[]));
        }
        let s = node.value.iter().copied().sum::<F>() / F::from_f64(node.value.len() as f64);
        let needs = node.needs_grad;
        Ok(self.push(vec![s], vec![1], Op::Mean { x: xi }, needs))
    }

    fn logits_dims(&self, xi: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.node(xi).shape;
        if s.len() != 2 || s[1] == 0 || s[0] == 0 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// Mean cross entropy of `[batch × classes]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (batch, k) = self.logits_dims(li, "cross_entropy")?;
        if labels.len() != batch {
            return Err(Error::dim("cross_entropy", &self.node(li).shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index { index: bad, bound: k });
        }
        let lv = &self.node(li).value;
        check_finite(lv, "cross_entropy")?;
        let mut probs = vec![F::zero(); lv.len()];
        let mut logp = vec![F::zero(); k];
        let mut total = F::zero();
        for (b, &y) in labels.iter().enumerate() {
            let row = &lv[b * k..(b + 1) * k];
            log_softmax_row(row, F::one(), &mut logp);
            total += -logp[y];
            for (p, &l) in probs[b * k..(b + 1) * k].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let value = total / F::from_f64(batch as f64);
        let needs = self.node(li).needs_grad;
        Ok(self.push(
            vec![value],
            vec![1],
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Batch mean of `KL(softmax(p/T) ‖ softmax(q/T))`. Gradients reach both
    /// arguments.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, t: F) -> Result<Var> {
        let (pi, qi) = self.same_shape(p_logits, q_logits, "kl_divergence")?;
        check_temperature(t)?;
        let (batch, k) = self.logits_dims(pi, "kl_divergence")?;
        let (pv, qv) = (&self.node(pi).value, &self.node(qi).value);
        check_finite(pv, "kl_divergence")?;
        check_finite(qv, "kl_divergence")?;
        let mut log_p = vec![F::zero(); pv.len()];
        let mut log_q = vec![F::zero(); qv.len()];
        let mut row_kl = vec![F::zero(); batch];
        let mut total = F::zero();
        for b in 0..batch {
            let r = b * k..(b + 1) * k;
            log_softmax_row(&pv[r.clone()], t, &mut log_p[r.clone()]);
            log_softmax_row(&qv[r.clone()], t, &mut log_q[r.clone()]);
            let mut kl = F::zero();
            for j in r {
                kl += log_p[j].exp() * (log_p[j] - log_q[j]);
            }
            row_kl[b] = kl;
            total += kl;
        }
        let value = total / F::from_f64(batch as f64);
        let needs = self.node(pi).needs_grad || self.node(qi).needs_grad;
        Ok(self.push(
            vec![value],
            vec![1],
            Op::KlDiv {
                p: pi,
                q: qi,
                t,
                log_p,
                log_q,
                row_kl,
            },
            needs,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape(a, b, "mse")?;
        let (av, bv) = (&self.node(ai).value, &self.node(bi).value);
        if av.is_empty() {
            return Err(Error::dim("mse", &[0], &[0]));
        }
        let s = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>();
        let value = s / F::from_f64(av.len() as f64);
        let needs = self.node(ai).needs_grad || self.node(bi).needs_grad;
        Ok(self.push(vec![value], vec![1], Op::Mse { a: ai, b: bi }, needs))
    }

    /// `1 − mean_b cos(a_b, b_b)` over `[batch × k]` rows. A zero row has
    /// similarity 0 and contributes no gradient.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape(a, b, "cosine_loss")?;
        let (batch, k) = self.logits_dims(ai, "cosine_loss")?;
        let (av, bv) = (&self.node(ai).value, &self.node(bi).value);
        let mut total = F::zero();
        for r in 0..batch {
            total += cosine_row(&av[r * k..(r + 1) * k], &bv[r * k..(r + 1) * k]).0;
        }
        let value = F::one() - total / F::from_f64(batch as f64);
        let needs = self.node(ai).needs_grad || self.node(bi).needs_grad;
        Ok(self.push(vec![value], vec![1], Op::Cosine { a: ai, b: bi }, needs))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        let li = self.idx(loss)?;
        let node = self.node(li);
        if node.value.len() != 1 {
            return Err(Error::dim("backward", &node.shape, &[1]));
        }
        if !node.needs_grad {
            return Err(Error::Tape(
                "loss is detached: it depends on no tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![F::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads { tape: self.id, grads })
    }

    /// Backward and accumulate into `store` in one call.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Grads<F>> {
        let grads = self.backward(loss)?;
        store.accumulate(self, &grads)?;
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        // Mutable view of input `j`'s gradient, or None when `j` needs none.
        macro_rules! slot {
            ($j:expr) => {{
                let j = $j;
                if nodes[j].needs_grad {
                    Some(
                        grads[j]
                            .get_or_insert_with(|| vec![F::zero(); nodes[j].value.len()])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = slot!(a) {
                    matmul_grad_lhs(g, &nodes[b].value, m, k, n, da);
                }
                if let Some(db) = slot!(b) {
                    matmul_grad_rhs(&nodes[a].value, g, m, k, n, db);
                }
            }
            &Op::AddBroadcast { x, p } => {
                if let Some(dx) = slot!(x) {
                    add_into(dx, g);
                }
                if let Some(dp) = slot!(p) {
                    let per = dp.len();
                    for chunk in g.chunks(per) {
                        add_into(dp, chunk);
                    }
                }
            }
            &Op::MulBroadcast { x, p } => {
                let per = nodes[p].value.len();
                if let Some(dx) = slot!(x) {
                    let pv = &nodes[p].value;
                    for (idx, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gv * pv[idx % per];
                    }
                }
                if let Some(dp) = slot!(p) {
                    let xv = &nodes[x].value;
                    for (gc, xc) in g.chunks(per).zip(xv.chunks(per)) {
                        for ((d, &gv), &xval) in dp.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xval;
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = slot!(a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(b) {
                    add_into(db, g);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = slot!(a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = slot!(a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&nodes[b].value) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot!(b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&nodes[a].value) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(dx) = slot!(x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            &Op::Gelu { x } => {
                if let Some(dx) = slot!(x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(&nodes[x].value) {
                        *d += gv * gelu_grad_scalar(xv);
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
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = nodes[gamma].value.len();
                if let Some(dg) = slot!(gamma) {
                    for (gc, hc) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gv), &h) in dg.iter_mut().zip(gc).zip(hc) {
                            *o += gv * h;
                        }
                    }
                }
                if let Some(db) = slot!(beta) {
                    for gc in g.chunks(d) {
                        add_into(db, gc);
                    }
                }
                if let Some(dx) = slot!(x) {
                    let gam = &nodes[gamma].value;
                    let df = F::from_f64(d as f64);
                    let mut dh = vec![F::zero(); d];
                    for (r, ((gc, hc), dxc)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut mean_dh = F::zero();
                        let mut mean_dhh = F::zero();
                        for j in 0..d {
                            dh[j] = gc[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dhh += dh[j] * hc[j];
                        }
                        mean_dh /= df;
                        mean_dhh /= df;
                        for j in 0..d {
                            dxc[j] += rstd[r] * (dh[j] - mean_dh - hc[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::Softmax { x, t } => {
                if let Some(dx) = slot!(x) {
                    let y = &nodes[i].value;
                    let k = *nodes[i].shape.last().expect("rank ≥ 1");
                    for ((gc, yc), dc) in g.chunks(k).zip(y.chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: F = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            dc[j] += yc[j] * (gc[j] - dot) / t;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, g, grads),
            &Op::Tile { x, times } => {
                if let Some(dx) = slot!(x) {
                    let n = dx.len();
                    for t in 0..times {
                        add_into(dx, &g[t * n..(t + 1) * n]);
                    }
                }
            }
            Op::ConcatSeq { parts, batch, dim } => {
                let total: usize = parts.iter().map(|&(_, s)| s).sum();
                let mut offset = 0;
                for &(pi, s) in parts {
                    if let Some(dp) = slot!(pi) {
                        for b in 0..*batch {
                            let from = (b * total + offset) * dim;
                            add_into(&mut dp[b * s * dim..(b + 1) * s * dim], &g[from..from + s * dim]);
                        }
                    }
                    offset += s;
                }
            }
            &Op::SliceSeq { x, seq, dim, start } => {
                if let Some(dx) = slot!(x) {
                    let len = nodes[i].shape[1];
                    let batch = nodes[i].shape[0];
                    for b in 0..batch {
                        let to = (b * seq + start) * dim;
                        add_into(&mut dx[to..to + len * dim], &g[b * len * dim..(b + 1) * len * dim]);
                    }
                }
            }
            &Op::MeanTokens {
                x,
                seq,
                dim,
                start,
                len,
            } => {
                if let Some(dx) = slot!(x) {
                    let batch = nodes[i].shape[0];
                    let inv = F::from_f64(1.0 / len as f64);
                    for b in 0..batch {
                        let grow = &g[b * dim..(b + 1) * dim];
                        for s in start..start + len {
                            let to = (b * seq + s) * dim;
                            for (d, &gv) in dx[to..to + dim].iter_mut().zip(grow) {
                                *d += if len > 1 { gv * inv } else { gv };
                            }
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = slot!(x) {
                    add_into(dx, g);
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = slot!(x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = slot!(x) {
                    let c = g[0] / F::from_f64(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(dl) = slot!(*logits) {
                    let batch = labels.len();
                    let k = probs.len() / batch;
                    let c = g[0] / F::from_f64(batch as f64);
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { F::one() } else { F::zero() };
                            dl[b * k + j] += c * (probs[b * k + j] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv {
                p,
                q,
                t,
                log_p,
                log_q,
                row_kl,
            } => {
                let batch = row_kl.len();
                let k = log_p.len() / batch;
                let c = g[0] / (F::from_f64(batch as f64) * *t);
                if let Some(dp) = slot!(*p) {
                    for b in 0..batch {
                        for j in b * k..(b + 1) * k {
                            dp[j] += c * log_p[j].exp() * (log_p[j] - log_q[j] - row_kl[b]);
                        }
                    }
                }
                if let Some(dq) = slot!(*q) {
                    for j in 0..log_q.len() {
                        dq[j] += c * (log_q[j].exp() - log_p[j].exp());
                    }
                }
            }
            &Op::Mse { a, b } => {
                let n = nodes[a].value.len();
                let c = F::from_f64(2.0) * g[0] / F::from_f64(n as f64);
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if let Some(da) = slot!(a) {
                    for j in 0..n {
                        da[j] += c * (av[j] - bv[j]);
                    }
                }
                if let Some(db) = slot!(b) {
                    for j in 0..n {
                        db[j] -= c * (av[j] - bv[j]);
                    }
                }
            }
            &Op::Cosine { a, b } => {
                let (batch, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let c = -g[0] / F::from_f64(batch as f64);
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                for r in 0..batch {
                    let (ar, br) = (&av[r * k..(r + 1) * k], &bv[r * k..(r + 1) * k]);
                    let (cos, na, nb) = cosine_row(ar, br);
                    if na == F::zero() || nb == F::zero() {
                        continue;
                    }
                    if let Some(da) = slot!(a) {
                        for j in 0..k {
                            da[r * k + j] += c * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                        }
                    }
                    if let Some(db) = slot!(b) {
                        for j in 0..k {
                            db[r * k + j] += c * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let nodes = &self.nodes;
        let dim = nodes[q].shape[2];
        let dh = dim / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
        let mut take = |j: usize| {
            if nodes[j].needs_grad {
                Some(grads[j].take().unwrap_or_else(|| vec![F::zero(); nodes[j].value.len()]))
            } else {
                None
            }
        };
        let (mut dq, mut dk, mut dv) = (take(q), take(k), take(v));
        let mut dp = vec![F::zero(); seq];
        let mut ds = vec![F::zero(); seq];
        for b in 0..batch {
            let base = b * seq * dim;
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let grow = &g[base + i * dim + off..base + i * dim + off + dh];
                    let mut dot = F::zero();
                    for j in 0..seq {
                        let vrow = &vv[base + j * dim + off..base + j * dim + off + dh];
                        let mut acc = F::zero();
                        for (&a, &c) in grow.iter().zip(vrow) {
                            acc += a * c;
                        }
                        dp[j] = acc;
                        dot += acc * prow[j];
                    }
                    for j in 0..seq {
                        ds[j] = prow[j] * (dp[j] - dot) * scale;
                    }
                    if let Some(dv) = dv.as_mut() {
                        for j in 0..seq {
                            let to = base + j * dim + off;
                            for (d, &gv) in dv[to..to + dh].iter_mut().zip(grow) {
                                *d += prow[j] * gv;
                            }
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        let to = base + i * dim + off;
                        for j in 0..seq {
                            let krow = &kv[base + j * dim + off..base + j * dim + off + dh];
                            for (d, &kval) in dq[to..to + dh].iter_mut().zip(krow) {
                                *d += ds[j] * kval;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qrow = &qv[base + i * dim + off..base + i * dim + off + dh];
                        for j in 0..seq {
                            let to = base + j * dim + off;
                            for (d, &qval) in dk[to..to + dh].iter_mut().zip(qrow) {
                                *d += ds[j] * qval;
                            }
                        }
                    }
                }
            }
        }
        // q, k and v may alias the same node.
        for (j, d) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(d) = d {
                match grads[j].as_mut() {
                    Some(existing) => add_into(existing, &d),
                    None => grads[j] = Some(d),
                }
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_temperature<F: Scalar>(t: F) -> Result<()> {
    if !t.is_finite() || t <= F::zero() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_finite<F: Scalar>(values: &[F], op: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input to {op}")));
    }
    Ok(())
}

/// Returns (cosine, |a|, |b|); cosine is 0 when either norm is 0.
fn cosine_row<F: Scalar>(a: &[F], b: &[F]) -> (F, F, F) {
    let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<F>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<F>().sqrt();
    if na == F::zero() || nb == F::zero() {
        return (F::zero(), na, nb);
    }
    (dot / (na * nb), na, nb)
}

pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    x * half * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() / F::from_f64(sqrt_2pi());
    cdf + x * pdf
}
