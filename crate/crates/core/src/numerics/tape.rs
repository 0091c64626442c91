//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value and enough saved state to run the operation backwards.
//! Nodes are appended in evaluation order, so walking the tape from the end
//! visits every node after all of its consumers.
//!
//! Parameters are not copied onto the tape: a parameter node borrows its
//! value from the slice the tape was created with, which keeps inference
//! passes on large models cheap.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Log-probability written for actions that are not available.
///
/// Finite so that no tape value is ever infinite; `exp` of it is exactly 0.
pub const UNAVAILABLE_LOGP: f64 = -1.0e9;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the per-sample communication mask maps onto attention entries.
///
/// The mask tensor has shape `[batch * agents, agents]`; entry `(b*N + j, i)`
/// is the edge `j -> i` of sample `b`, meaning agent `i` may read agent `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLayout {
    /// `N` queries over `N` keys; query `i` may read key `j` iff edge `j -> i`.
    Graph,
    /// `N` queries over `2N` keys. Keys `0..N` are the queries' own tokens
    /// (each query reads only its own), keys `N..2N` are per-agent action
    /// tokens, readable by query `i` iff `j < i` and edge `j -> i`.
    DecoderSelf,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub agents: usize,
    pub heads: usize,
    pub layout: MaskLayout,
}

impl AttentionShape {
    fn keys(&self) -> usize {
        match self.layout {
            MaskLayout::Graph => self.agents,
            MaskLayout::DecoderSelf => 2 * self.agents,
        }
    }

    #[inline]
    fn mask_index(&self, b: usize, i: usize, j: usize) -> Option<usize> {
        let n = self.agents;
        match self.layout {
            MaskLayout::Graph => Some((b * n + j) * n + i),
            MaskLayout::DecoderSelf => {
                if j >= n && j - n < i {
                    Some((b * n + (j - n)) * n + i)
                } else {
                    None
                }
            }
        }
    }

    #[inline]
    fn mask_value(&self, mask: &[f64], b: usize, i: usize, j: usize) -> f64 {
        match self.mask_index(b, i, j) {
            Some(idx) => mask[idx],
            None => {
                if self.layout == MaskLayout::DecoderSelf && j == i {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Var,
        shape: AttentionShape,
        scores: Vec<f64>,
        weights: Vec<f64>,
        row_max: Vec<f64>,
        row_z: Vec<f64>,
    },
    ConcatSeq {
        a: Var,
        b: Var,
        batch: usize,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    MaskedLogSoftmax {
        x: Var,
        avail: Vec<bool>,
        probs: Vec<f64>,
    },
    Pick(Var, Vec<usize>),
    Entropy {
        logp: Var,
        avail: Vec<bool>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, tape: &Tape<'_>, var: Var) -> Tensor {
        let shape = tape.value(var).shape().to_vec();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params[*id],
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients are not propagated into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for parameter `id`; repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(k, tb.rows(), "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "elementwise operands differ in shape");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, f64::min);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Minimum(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.cols();
        assert_eq!(tr.len(), n, "bias width differs from matrix width");
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(tr.data()).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(row);
        self.push(t, Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| gelu(x).0);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.map(a, |x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise layer normalisation with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mu) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::matrix(m, n, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head attention whose weights are multiplied by a per-sample
    /// communication mask before normalisation.
    ///
    /// Entries with mask value exactly zero are skipped in the forward pass,
    /// so the output is bit-for-bit independent of the keys and values they
    /// would have read. The mask itself is differentiable.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Var, shape: AttentionShape) -> Var {
        let (tq, tk, tv, tm) = (self.value(q), self.value(k), self.value(v), self.value(mask));
        let (bsz, n, h) = (shape.batch, shape.agents, shape.heads);
        let nk = shape.keys();
        let d = tq.cols();
        assert_eq!(d % h, 0, "model width must divide into heads");
        assert_eq!(tq.rows(), bsz * n, "query rows");
        assert_eq!(tk.rows(), bsz * nk, "key rows");
        assert_eq!(tv.rows(), bsz * nk, "value rows");
        assert_eq!(tm.rows(), bsz * n, "mask rows");
        assert_eq!(tm.cols(), n, "mask cols");
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, md) = (tq.data(), tk.data(), tv.data(), tm.data());

        let mut scores = vec![0.0; bsz * h * n * nk];
        let mut weights = vec![0.0; bsz * h * n * nk];
        let mut row_max = vec![0.0; bsz * h * n];
        let mut row_z = vec![0.0; bsz * h * n];
        let mut out = vec![0.0; bsz * n * d];
        for b in 0..bsz {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..n {
                    let qi = &qd[(b * n + i) * d + off..(b * n + i) * d + off + dh];
                    let base = ((b * h + hd) * n + i) * nk;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..nk {
                        let kj = &kd[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                        let s = scale * dot(qi, kj);
                        scores[base + j] = s;
                        if shape.mask_value(md, b, i, j) != 0.0 && s > mx {
                            mx = s;
                        }
                    }
                    assert!(mx.is_finite(), "attention row {i} has no readable key");
                    let mut z = 0.0;
                    for j in 0..nk {
                        let m = shape.mask_value(md, b, i, j);
                        if m != 0.0 {
                            let e = m * (scores[base + j] - mx).exp();
                            weights[base + j] = e;
                            z += e;
                        }
                    }
                    row_max[(b * h + hd) * n + i] = mx;
                    row_z[(b * h + hd) * n + i] = z;
                    let o = &mut out[(b * n + i) * d + off..(b * n + i) * d + off + dh];
                    for j in 0..nk {
                        if weights[base + j] != 0.0 {
                            weights[base + j] /= z;
                            let w = weights[base + j];
                            let vj = &vd[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                            o.iter_mut().zip(vj).for_each(|(a, x)| *a += w * x);
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || self.rg(mask);
        self.push(
            Tensor::matrix(bsz * n, d, out),
            Op::Attention {
                q,
                k,
                v,
                mask,
                shape,
                scores,
                weights,
                row_max,
                row_z,
            },
            rg,
        )
    }

    /// Per sample, stacks the rows of `a` above the rows of `b`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.cols();
        assert_eq!(d, tb.cols());
        let (na, nb) = (ta.rows() / batch, tb.rows() / batch);
        let mut out = Vec::with_capacity((na + nb) * batch * d);
        for s in 0..batch {
            out.extend_from_slice(&ta.data()[s * na * d..(s + 1) * na * d]);
            out.extend_from_slice(&tb.data()[s * nb * d..(s + 1) * nb * d]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::matrix(batch * (na + nb), d, out),
            Op::ConcatSeq { a, b, batch },
            rg,
        )
    }

    /// Selects rows by index (an embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in &idx {
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::matrix(idx.len(), d, out);
        let rg = self.rg(x);
        self.push(t, Op::GatherRows(x, idx), rg)
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero `n_rows x d` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, n_rows: usize) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        assert_eq!(idx.len(), tx.rows());
        let mut out = vec![0.0; n_rows * d];
        for (r, &dst) in idx.iter().enumerate() {
            out[dst * d..(dst + 1) * d]
                .iter_mut()
                .zip(tx.row(r))
                .for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(n_rows, d, out), Op::ScatterRows(x, idx), rg)
    }

    /// Row-wise log-softmax restricted to available entries; unavailable
    /// entries read [`UNAVAILABLE_LOGP`].
    pub fn masked_log_softmax(&mut self, x: Var, avail: Vec<bool>) -> Var {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(avail.len(), m * n);
        let mut out = vec![UNAVAILABLE_LOGP; m * n];
        let mut probs = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let a = &avail[r * n..(r + 1) * n];
            let mx = row
                .iter()
                .zip(a)
                .filter(|(_, ok)| **ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "row {r} has no available action");
            let z: f64 = row
                .iter()
                .zip(a)
                .filter(|(_, ok)| **ok)
                .map(|(v, _)| (v - mx).exp())
                .sum();
            let lz = z.ln();
            for c in 0..n {
                if a[c] {
                    let lp = row[c] - mx - lz;
                    out[r * n + c] = lp;
                    probs[r * n + c] = lp.exp();
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(m, n, out),
            Op::MaskedLogSoftmax { x, avail, probs },
            rg,
        )
    }

    /// Picks column `idx[r]` of every row `r`, giving an `m x 1` column.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let tx = self.value(x);
        assert_eq!(idx.len(), tx.rows());
        let out = idx.iter().enumerate().map(|(r, &c)| tx.get(r, c)).collect();
        let t = Tensor::matrix(idx.len(), 1, out);
        let rg = self.rg(x);
        self.push(t, Op::Pick(x, idx), rg)
    }

    /// Entropy of each row of log-probabilities over its available entries.
    pub fn entropy(&mut self, logp: Var, avail: Vec<bool>) -> Var {
        let t = self.value(logp);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m];
        for r in 0..m {
            for c in 0..n {
                if avail[r * n + c] {
                    let lp = t.get(r, c);
                    out[r] -= lp.exp() * lp;
                }
            }
        }
        let rg = self.rg(logp);
        self.push(Tensor::matrix(m, 1, out), Op::Entropy { logp, avail }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every parameter (zeros for parameters the pass did not use).
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&self.param_vars)
            .map(|(p, v)| match v.and_then(|v| grads.grads[v.0].clone()) {
                Some(g) => Tensor::new(p.shape().to_vec(), g),
                None => Tensor::zeros(p.shape().to_vec()),
            })
            .collect()
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC * B^T, dB = A^T * dC
                acc(grads, *a, &|s| {
                    gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), s, true)
                });
                acc(grads, *b, &|s| {
                    gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), s, true)
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|s| add_into(s, g));
                acc(grads, *b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|s| add_into(s, g));
                acc(grads, *b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * tb[i];
                    }
                });
                acc(grads, *b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ta[i];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        if ta[i] <= tb[i] {
                            s[i] += g[i];
                        }
                    }
                });
                acc(grads, *b, &|s| {
                    for i in 0..s.len() {
                        if ta[i] > tb[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, &|s| add_into(s, g));
                let n = self.value(*row).len();
                acc(grads, *row, &|s| {
                    for chunk in g.chunks(n) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &|s| {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::Exp(a) => {
                let out = self.nodes[idx].value.as_ref().unwrap().data();
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu(x[i]).1;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let gm = self.value(*gamma).data();
                acc(grads, *gamma, &|s| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            s[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(grads, *beta, &|s| {
                    for gr in g.chunks(n) {
                        add_into(s, gr);
                    }
                });
                acc(grads, *x, &|s| {
                    let mut dh = vec![0.0; n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dh[c] = gr[c] * gm[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            s[r * n + c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                shape,
                scores,
                weights,
                row_max,
                row_z,
            } => self.attention_backward(
                g,
                grads,
                (*q, *k, *v, *mask),
                shape,
                scores,
                weights,
                row_max,
                row_z,
            ),
            Op::ConcatSeq { a, b, batch } => {
                let d = self.value(*a).cols();
                let na = self.value(*a).rows() / batch;
                let nb = self.value(*b).rows() / batch;
                acc(grads, *a, &|s| {
                    for smp in 0..*batch {
                        let src = &g[smp * (na + nb) * d..(smp * (na + nb) + na) * d];
                        add_into(&mut s[smp * na * d..(smp + 1) * na * d], src);
                    }
                });
                acc(grads, *b, &|s| {
                    for smp in 0..*batch {
                        let src = &g[(smp * (na + nb) + na) * d..(smp + 1) * (na + nb) * d];
                        add_into(&mut s[smp * nb * d..(smp + 1) * nb * d], src);
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                let d = self.value(*x).cols();
                acc(grads, *x, &|s| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut s[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ScatterRows(x, rows) => {
                let d = self.value(*x).cols();
                acc(grads, *x, &|s| {
                    for (r, &dst) in rows.iter().enumerate() {
                        add_into(&mut s[r * d..(r + 1) * d], &g[dst * d..(dst + 1) * d]);
                    }
                });
            }
            Op::MaskedLogSoftmax { x, avail, probs } => {
                let n = self.value(*x).cols();
                acc(grads, *x, &|s| {
                    for r in 0..probs.len() / n {
                        let span = r * n..(r + 1) * n;
                        let tot: f64 = g[span.clone()]
                            .iter()
                            .zip(&avail[span.clone()])
                            .filter(|(_, ok)| **ok)
                            .map(|(v, _)| *v)
                            .sum();
                        for c in span {
                            if avail[c] {
                                s[c] += g[c] - probs[c] * tot;
                            }
                        }
                    }
                });
            }
            Op::Pick(x, cols) => {
                let n = self.value(*x).cols();
                acc(grads, *x, &|s| {
                    for (r, &c) in cols.iter().enumerate() {
                        s[r * n + c] += g[r];
                    }
                });
            }
            Op::Entropy { logp, avail } => {
                let t = self.value(*logp);
                let n = t.cols();
                acc(grads, *logp, &|s| {
                    for (i, lp) in t.data().iter().enumerate() {
                        if avail[i] {
                            s[i] -= g[i / n] * lp.exp() * (lp + 1.0);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v, mask): (Var, Var, Var, Var),
        shape: &AttentionShape,
        scores: &[f64],
        weights: &[f64],
        row_max: &[f64],
        row_z: &[f64],
    ) {
        let (tq, tk, tv, tm) = (self.value(q), self.value(k), self.value(v), self.value(mask));
        let (bsz, n, h) = (shape.batch, shape.agents, shape.heads);
        let nk = shape.keys();
        let d = tq.cols();
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, md) = (tq.data(), tk.data(), tv.data(), tm.data());

        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dm = vec![0.0; md.len()];
        let mut dw = vec![0.0; nk];
        for b in 0..bsz {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..n {
                    let gi = &g[(b * n + i) * d + off..(b * n + i) * d + off + dh];
                    let base = ((b * h + hd) * n + i) * nk;
                    let w = &weights[base..base + nk];
                    let mut c = 0.0;
                    for j in 0..nk {
                        let vj = &vd[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                        dw[j] = dot(gi, vj);
                        c += w[j] * dw[j];
                        if w[j] != 0.0 {
                            let dvj = &mut dv[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                            dvj.iter_mut().zip(gi).for_each(|(a, x)| *a += w[j] * x);
                        }
                    }
                    let mx = row_max[(b * h + hd) * n + i];
                    let z = row_z[(b * h + hd) * n + i];
                    for j in 0..nk {
                        if let Some(mi) = shape.mask_index(b, i, j) {
                            // Masked entries still carry a gradient to the
                            // mask; cap the exponent so it stays finite.
                            let u = (scores[base + j] - mx).min(50.0).exp();
                            dm[mi] += u / z * (dw[j] - c);
                        }
                        let ds = w[j] * (dw[j] - c);
                        if ds != 0.0 {
                            let qrow = (b * n + i) * d + off;
                            let krow = (b * nk + j) * d + off;
                            for t in 0..dh {
                                dq[qrow + t] += scale * ds * kd[krow + t];
                                dk[krow + t] += scale * ds * qd[qrow + t];
                            }
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv), (mask, dm)] {
            if self.nodes[var.0].requires_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; buf.len()]);
                add_into(slot, &buf);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Tanh-approximated GELU and its derivative.
#[inline]
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}
