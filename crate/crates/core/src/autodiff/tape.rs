use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, gemm, gemm_nt_acc, gemm_tn_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Neighbourhood structure for one graph in compressed sparse row form.
///
/// Pair `p` in `offsets[i]..offsets[i + 1]` is the directed edge `i ← neighbors[p]`.
/// When several graphs of the same size are batched, node `i` of graph `b`
/// lives at row `b * nodes + i` and all graphs share the pair list.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub nodes: usize,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl AttentionLayout {
    pub fn pairs(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors_of(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum {
        input: usize,
        axis: Option<usize>,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    SegmentMean {
        input: usize,
        group: usize,
    },
    BlockLeftMul {
        input: usize,
        block: Arc<Tensor>,
    },
    GraphAttention {
        q: usize,
        k: usize,
        v: usize,
        edge: Option<usize>,
        layout: Arc<AttentionLayout>,
        heads: usize,
        alpha: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GruCell {
        x: usize,
        h: usize,
        w: [usize; 3],
        b: [usize; 3],
        /// Reset gate, update gate and candidate, each `[M × H]`.
        r: Vec<f64>,
        z: Vec<f64>,
        c: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records every operation of a forward pass for a single reverse sweep.
///
/// A tape is single-use: once [`Tape::backward`] has run it refuses a second
/// sweep. Operations whose inputs do not track gradients are stored as plain
/// constants.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let nodes = self.nodes.borrow();
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| nodes[p.id].value.dims2())
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let value = match axis {
            0 => {
                for (p, &(_, c)) in parts.iter().zip(&dims) {
                    if c != c0 {
                        return Err(Error::shape("concat", &[r0, c0], nodes[p.id].value.shape()));
                    }
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            1 => {
                for (p, &(r, _)) in parts.iter().zip(&dims) {
                    if r != r0 {
                        return Err(Error::shape("concat", &[r0, c0], nodes[p.id].value.shape()));
                    }
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for row in 0..r0 {
                    for (p, &(_, c)) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&nodes[p.id].value.data()[row * c..(row + 1) * c]);
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
            _ => return Err(Error::InvalidArgument(format!("concat axis {axis}"))),
        };
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let tracked = self.tracked(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, tracked))
    }

    /// Multi-head scaled dot-product attention over an explicit neighbourhood,
    /// with optional per-pair edge embeddings added to keys and values.
    ///
    /// `q`, `k`, `v` are `[B·N × C·d]`; `edge`, when present, is `[P × C·d]`
    /// with one row per pair of `layout`. For node `i`, head `c`:
    /// `α_ij = softmax_j(q_i·(k_j + e_ij)/√d)` and
    /// `out_i = Σ_j α_ij (v_j + e_ij)`, heads concatenated column-wise.
    pub fn graph_attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        edge: Option<Var<'t>>,
        layout: &Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<(Var<'t>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let qv = &nodes[q.id].value;
        let (rows, width) = qv.dims2()?;
        for other in [k, v] {
            if nodes[other.id].value.shape() != qv.shape() {
                return Err(Error::shape(
                    "graph_attention",
                    qv.shape(),
                    nodes[other.id].value.shape(),
                ));
            }
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {width} not divisible into {heads} heads"
            )));
        }
        let n = layout.nodes;
        if n == 0 || rows % n != 0 {
            return Err(Error::InvalidArgument(format!(
                "{rows} rows is not a whole number of {n}-node graphs"
            )));
        }
        let pairs = layout.pairs();
        if let Some(e) = edge {
            let es = nodes[e.id].value.shape();
            if es != [pairs, width] {
                return Err(Error::shape("graph_attention edge", es, &[pairs, width]));
            }
        }
        if let Some(i) = (0..n).find(|&i| layout.neighbors_of(i).is_empty()) {
            return Err(Error::InvalidArgument(format!("node {i} has an empty neighbourhood")));
        }
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let graphs = rows / n;
        let qd = qv.data();
        let kd = nodes[k.id].value.data();
        let vd = nodes[v.id].value.data();
        let ed = edge.map(|e| nodes[e.id].value.data());

        let mut out = vec![0.0; rows * width];
        let mut alpha = vec![0.0; graphs * pairs * heads];
        let mut scores = Vec::new();
        for b in 0..graphs {
            for i in 0..n {
                let ri = b * n + i;
                let range = layout.neighbors_of(i);
                for c in 0..heads {
                    let cols = c * d..(c + 1) * d;
                    let qi = &qd[ri * width..][cols.clone()];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for p in range.clone() {
                        let rj = b * n + layout.neighbors[p];
                        let kj = &kd[rj * width..][cols.clone()];
                        let mut s = 0.0;
                        match ed {
                            Some(ed) => {
                                let eij = &ed[p * width..][cols.clone()];
                                for t in 0..d {
                                    s += qi[t] * (kj[t] + eij[t]);
                                }
                            }
                            None => {
                                for t in 0..d {
                                    s += qi[t] * kj[t];
                                }
                            }
                        }
                        s *= scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut denom = 0.0;
                    for s in &mut scores {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let oi = &mut out[ri * width..][cols.clone()];
                    for (slot, p) in range.clone().enumerate() {
                        let a = scores[slot] / denom;
                        alpha[(b * pairs + p) * heads + c] = a;
                        let rj = b * n + layout.neighbors[p];
                        let vj = &vd[rj * width..][cols.clone()];
                        for t in 0..d {
                            oi[t] += a * vj[t];
                        }
                        if let Some(ed) = ed {
                            let eij = &ed[p * width..][cols.clone()];
                            for t in 0..d {
                                oi[t] += a * eij[t];
                            }
                        }
                    }
                }
            }
        }
        drop(nodes);
        let value = Tensor::matrix(rows, width, out)?;
        let mut ids = vec![q.id, k.id, v.id];
        ids.extend(edge.map(|e| e.id));
        let tracked = self.tracked(&ids);
        let var = self.push(
            value,
            Op::GraphAttention {
                q: q.id,
                k: k.id,
                v: v.id,
                edge: edge.map(|e| e.id),
                layout: Arc::clone(layout),
                heads,
                alpha: if tracked { alpha.clone() } else { Vec::new() },
            },
            tracked,
        );
        Ok((var, alpha))
    }

    /// Mean softmax cross-entropy of `[B × classes]` logits against integer labels,
    /// evaluated in log-sum-exp form.
    pub fn cross_entropy<'t>(&'t self, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[logits.id].value;
        let (batch, classes) = lv.dims2()?;
        if batch != labels.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange(bad));
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv.data()[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for (p, x) in probs[b * classes..].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        loss /= batch as f64;
        drop(nodes);
        let tracked = self.tracked(&[logits.id]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// One GRU update for every row, recorded as a single node.
    ///
    /// `x` is `[M × F]`, `h` is `[M × H]`, each `w` is `[(H + F) × H]` and each
    /// `b` has `H` entries, in reset, update, candidate order:
    /// `r = σ([h, x]W_r + b_r)`, `z = σ([h, x]W_z + b_z)`,
    /// `c = tanh([r∗h, x]W_c + b_c)`, `h' = (1 − z)∗h + z∗c`.
    pub fn gru_cell<'t>(&'t self, x: Var<'t>, h: Var<'t>, w: [Var<'t>; 3], b: [Var<'t>; 3]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let (m, f) = nodes[x.id].value.dims2()?;
        let hv = &nodes[h.id].value;
        let (mh, hidden) = hv.dims2()?;
        if mh != m {
            return Err(Error::shape("gru_cell", &[m, hidden], hv.shape()));
        }
        let k = hidden + f;
        for (wi, bi) in w.iter().zip(&b) {
            let ws = nodes[wi.id].value.shape();
            if ws != [k, hidden] {
                return Err(Error::shape("gru_cell weight", &[k, hidden], ws));
            }
            if nodes[bi.id].value.len() != hidden {
                return Err(Error::shape("gru_cell bias", &[hidden], nodes[bi.id].value.shape()));
            }
        }
        let (xd, hd) = (nodes[x.id].value.data(), hv.data());
        let hx = stack_columns(hd, xd, m, hidden, f);
        let affine = |input: &[f64], wi: usize, bi: usize| {
            let bias = nodes[bi].value.data();
            let mut out: Vec<f64> = (0..m).flat_map(|_| bias.iter().copied()).collect();
            gemm(m, k, hidden, input, nodes[wi].value.data(), &mut out, true);
            out
        };
        let mut r = affine(&hx, w[0].id, b[0].id);
        r.iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
        let mut z = affine(&hx, w[1].id, b[1].id);
        z.iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
        let rhx = reset_columns(hx, &r, m, hidden, f);
        let mut c = affine(&rhx, w[2].id, b[2].id);
        c.iter_mut().for_each(|v| *v = v.tanh());
        let out: Vec<f64> = (0..m * hidden).map(|i| hd[i] + z[i] * (c[i] - hd[i])).collect();
        drop(nodes);

        let mut ids = vec![x.id, h.id];
        ids.extend(w.iter().chain(&b).map(|v| v.id));
        let tracked = self.tracked(&ids);
        let op = Op::GruCell {
            x: x.id,
            h: h.id,
            w: w.map(|v| v.id),
            b: b.map(|v| v.id),
            r,
            z,
            c,
        };
        Ok(self.push(Tensor::matrix(m, hidden, out)?, op, tracked))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::filled(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn map_grad(g: &Tensor, input: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(input.data())
        .map(|(&gi, &xi)| f(gi, xi))
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same length")
}

fn backprop_node(
    nodes: &[Node],
    id: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = av.dims2()?;
            let (_, n) = bv.dims2()?;
            if nodes[*a].requires_grad {
                let mut da = Tensor::zeros(av.shape());
                gemm_nt_acc(m, k, n, g.data(), bv.data(), da.data_mut());
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = Tensor::zeros(bv.shape());
                gemm_tn_acc(m, k, n, av.data(), g.data(), db.data_mut());
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::AddRow(a, bias) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*bias].requires_grad {
                let (rows, cols) = g.dims2()?;
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for (acc, v) in db.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *acc += v;
                    }
                }
                let db = Tensor::new(nodes[*bias].value.shape().to_vec(), db)?;
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            let mut neg = g.clone();
            neg.scale_in_place(-1.0);
            accumulate(nodes, grads, *b, neg);
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let da = map_grad(g, &nodes[*b].value, |gi, bi| gi * bi);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let db = map_grad(g, &nodes[*a].value, |gi, ai| gi * ai);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Scale(a, c) => {
            let mut da = g.clone();
            da.scale_in_place(*c);
            accumulate(nodes, grads, *a, da);
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Concat { parts, axis } => {
            let (rows, cols) = out.dims2()?;
            let mut col_off = 0;
            let mut row_off = 0;
            for &p in parts {
                let (pr, pc) = nodes[p].value.dims2()?;
                if nodes[p].requires_grad {
                    let mut dp = Vec::with_capacity(pr * pc);
                    if *axis == 0 {
                        dp.extend_from_slice(&g.data()[row_off * cols..(row_off + pr) * cols]);
                    } else {
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * cols + col_off..][..pc]);
                        }
                    }
                    let dp = Tensor::new(nodes[p].value.shape().to_vec(), dp)?;
                    accumulate(nodes, grads, p, dp);
                }
                row_off += pr;
                col_off += pc;
            }
        }
        Op::Sigmoid(a) => {
            let da = map_grad(g, out, |gi, y| gi * y * (1.0 - y));
            accumulate(nodes, grads, *a, da);
        }
        Op::Tanh(a) => {
            let da = map_grad(g, out, |gi, y| gi * (1.0 - y * y));
            accumulate(nodes, grads, *a, da);
        }
        Op::Relu(a) => {
            let da = map_grad(g, &nodes[*a].value, |gi, x| if x > 0.0 { gi } else { 0.0 });
            accumulate(nodes, grads, *a, da);
        }
        Op::Exp(a) => {
            let da = map_grad(g, out, |gi, y| gi * y);
            accumulate(nodes, grads, *a, da);
        }
        Op::Log(a) => {
            let da = map_grad(g, &nodes[*a].value, |gi, x| gi / x);
            accumulate(nodes, grads, *a, da);
        }
        Op::Sum { input, axis } => {
            let iv = &nodes[*input].value;
            let da = match axis {
                None => Tensor::filled(iv.shape(), g.data()[0]),
                Some(axis) => {
                    let (rows, cols) = iv.dims2()?;
                    Tensor::from_fn(iv.shape(), |idx| {
                        let (r, c) = (idx / cols, idx % cols);
                        if *axis == 0 {
                            g.data()[c]
                        } else {
                            let _ = rows;
                            g.data()[r]
                        }
                    })
                }
            };
            accumulate(nodes, grads, *input, da);
        }
        Op::Softmax { input, axis } => {
            let (rows, cols) = out.dims2()?;
            let y = out.data();
            let gd = g.data();
            let mut dx = vec![0.0; rows * cols];
            if *axis == 1 {
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = y[span.clone()].iter().zip(&gd[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        dx[i] = y[i] * (gd[i] - dot);
                    }
                }
            } else {
                for c in 0..cols {
                    let dot: f64 = (0..rows).map(|r| y[r * cols + c] * gd[r * cols + c]).sum();
                    for r in 0..rows {
                        let i = r * cols + c;
                        dx[i] = y[i] * (gd[i] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *input, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::Dropout { input, mask } => {
            let data = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
            accumulate(nodes, grads, *input, Tensor::new(out.shape().to_vec(), data)?);
        }
        Op::SegmentMean { input, group } => {
            let iv = &nodes[*input].value;
            let (_, cols) = iv.dims2()?;
            let inv = 1.0 / *group as f64;
            let da = Tensor::from_fn(iv.shape(), |idx| {
                let (r, c) = (idx / cols, idx % cols);
                g.data()[(r / group) * cols + c] * inv
            });
            accumulate(nodes, grads, *input, da);
        }
        Op::BlockLeftMul { input, block } => {
            let iv = &nodes[*input].value;
            let (rows, cols) = iv.dims2()?;
            let n = block.shape()[0];
            let mut dx = Tensor::zeros(iv.shape());
            for b in 0..rows / n {
                let span = b * n * cols..(b + 1) * n * cols;
                gemm_tn_acc(n, n, cols, block.data(), &g.data()[span.clone()], &mut dx.data_mut()[span]);
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::GraphAttention {
            q,
            k,
            v,
            edge,
            layout,
            heads,
            alpha,
        } => attention_backward(nodes, grads, g, (*q, *k, *v, *edge), layout, *heads, alpha)?,
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let lv = &nodes[*logits].value;
            let (batch, classes) = lv.dims2()?;
            let scale = g.data()[0] / batch as f64;
            let mut dl = probs.clone();
            for (b, &label) in labels.iter().enumerate() {
                dl[b * classes + label] -= 1.0;
            }
            for x in &mut dl {
                *x *= scale;
            }
            accumulate(nodes, grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
        }
        Op::GruCell { x, h, w, b, r, z, c } => gru_backward(nodes, grads, g, (*x, *h), w, b, (r, z, c))?,
    }
    Ok(())
}

/// `[h, x]` row by row.
fn stack_columns(h: &[f64], x: &[f64], m: usize, hidden: usize, f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * (hidden + f));
    for i in 0..m {
        out.extend_from_slice(&h[i * hidden..(i + 1) * hidden]);
        out.extend_from_slice(&x[i * f..(i + 1) * f]);
    }
    out
}

/// Turns `[h, x]` into `[r∗h, x]` in place.
fn reset_columns(mut hx: Vec<f64>, r: &[f64], m: usize, hidden: usize, f: usize) -> Vec<f64> {
    let k = hidden + f;
    for i in 0..m {
        for j in 0..hidden {
            hx[i * k + j] *= r[i * hidden + j];
        }
    }
    hx
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}

fn gru_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    (x, h): (usize, usize),
    w: &[usize; 3],
    b: &[usize; 3],
    (r, z, c): (&[f64], &[f64], &[f64]),
) -> Result<()> {
    let (m, f) = nodes[x].value.dims2()?;
    let hd = nodes[h].value.data();
    let (k, hidden) = nodes[w[0]].value.dims2()?;
    let gd = g.data();
    let hx = stack_columns(hd, nodes[x].value.data(), m, hidden, f);
    let rhx = reset_columns(hx.clone(), r, m, hidden, f);
    let tracks = |id: usize| nodes[id].requires_grad;

    // Pre-activation gradients of the candidate and update gate.
    let dc: Vec<f64> = (0..m * hidden).map(|i| gd[i] * z[i] * (1.0 - c[i] * c[i])).collect();
    let dz: Vec<f64> = (0..m * hidden)
        .map(|i| gd[i] * (c[i] - hd[i]) * z[i] * (1.0 - z[i]))
        .collect();
    let mut drhx = vec![0.0; m * k];
    gemm_nt_acc(m, k, hidden, &dc, nodes[w[2]].value.data(), &mut drhx);
    let mut dr = vec![0.0; m * hidden];
    let mut dh: Vec<f64> = (0..m * hidden).map(|i| gd[i] * (1.0 - z[i])).collect();
    for i in 0..m {
        for j in 0..hidden {
            let (t, u) = (i * hidden + j, i * k + j);
            dr[t] = drhx[u] * hd[t] * r[t] * (1.0 - r[t]);
            dh[t] += drhx[u] * r[t];
        }
    }
    let mut dhx = vec![0.0; m * k];
    if tracks(h) || tracks(x) {
        gemm_nt_acc(m, k, hidden, &dz, nodes[w[1]].value.data(), &mut dhx);
        gemm_nt_acc(m, k, hidden, &dr, nodes[w[0]].value.data(), &mut dhx);
    }
    for (pre, input, wi, bi) in [(&dr, &hx, w[0], b[0]), (&dz, &hx, w[1], b[1]), (&dc, &rhx, w[2], b[2])] {
        if tracks(wi) {
            let mut dw = Tensor::zeros(&[k, hidden]);
            gemm_tn_acc(m, k, hidden, input, pre, dw.data_mut());
            accumulate(nodes, grads, wi, dw);
        }
        if tracks(bi) {
            let db = Tensor::new(nodes[bi].value.shape().to_vec(), column_sums(pre, hidden))?;
            accumulate(nodes, grads, bi, db);
        }
    }
    if tracks(h) {
        for i in 0..m {
            for j in 0..hidden {
                dh[i * hidden + j] += dhx[i * k + j];
            }
        }
        accumulate(nodes, grads, h, Tensor::matrix(m, hidden, dh)?);
    }
    if tracks(x) {
        let dx: Vec<f64> = (0..m)
            .flat_map(|i| (hidden..k).map(move |j| (i, j)))
            .map(|(i, j)| drhx[i * k + j] + dhx[i * k + j])
            .collect();
        accumulate(nodes, grads, x, Tensor::matrix(m, f, dx)?);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    (q, k, v, edge): (usize, usize, usize, Option<usize>),
    layout: &AttentionLayout,
    heads: usize,
    alpha: &[f64],
) -> Result<()> {
    let qv = &nodes[q].value;
    let (rows, width) = qv.dims2()?;
    let n = layout.nodes;
    let pairs = layout.pairs();
    let d = width / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let qd = qv.data();
    let kd = nodes[k].value.data();
    let vd = nodes[v].value.data();
    let ed = edge.map(|e| nodes[e].value.data());
    let gd = g.data();

    let mut dq = vec![0.0; rows * width];
    let mut dk = vec![0.0; rows * width];
    let mut dv = vec![0.0; rows * width];
    let mut de = vec![0.0; if edge.is_some() { pairs * width } else { 0 }];
    let mut dalpha = Vec::new();
    for b in 0..rows / n {
        for i in 0..n {
            let ri = b * n + i;
            let range = layout.neighbors_of(i);
            for c in 0..heads {
                let cols = c * d..(c + 1) * d;
                let gi = &gd[ri * width..][cols.clone()];
                dalpha.clear();
                let mut weighted = 0.0;
                for p in range.clone() {
                    let rj = b * n + layout.neighbors[p];
                    let a = alpha[(b * pairs + p) * heads + c];
                    let vj = &vd[rj * width..][cols.clone()];
                    let mut da = 0.0;
                    for t in 0..d {
                        da += gi[t] * vj[t];
                    }
                    if let Some(ed) = ed {
                        let eij = &ed[p * width..][cols.clone()];
                        for t in 0..d {
                            da += gi[t] * eij[t];
                        }
                    }
                    for t in 0..d {
                        dv[rj * width + c * d + t] += a * gi[t];
                    }
                    if edge.is_some() {
                        for t in 0..d {
                            de[p * width + c * d + t] += a * gi[t];
                        }
                    }
                    weighted += a * da;
                    dalpha.push(da);
                }
                for (slot, p) in range.clone().enumerate() {
                    let rj = b * n + layout.neighbors[p];
                    let a = alpha[(b * pairs + p) * heads + c];
                    let ds = a * (dalpha[slot] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..d {
                        let key = kd[rj * width + c * d + t]
                            + ed.map_or(0.0, |ed| ed[p * width + c * d + t]);
                        dq[ri * width + c * d + t] += ds * key;
                        let qi = qd[ri * width + c * d + t];
                        dk[rj * width + c * d + t] += ds * qi;
                        if edge.is_some() {
                            de[p * width + c * d + t] += ds * qi;
                        }
                    }
                }
            }
        }
    }
    let shape = qv.shape().to_vec();
    accumulate(nodes, grads, q, Tensor::new(shape.clone(), dq)?);
    accumulate(nodes, grads, k, Tensor::new(shape.clone(), dk)?);
    accumulate(nodes, grads, v, Tensor::new(shape, dv)?);
    if let Some(e) = edge {
        accumulate(nodes, grads, e, Tensor::new(nodes[e].value.shape().to_vec(), de)?);
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let tracked = self.tape.tracked(&[self.id, other.id]);
        Ok(self.tape.push(value, op(self.id, other.id), tracked))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
                .expect("same length")
        };
        let tracked = self.requires_grad();
        self.tape.push(value, op, tracked)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 || a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), b.data(), &mut c, false);
            Tensor::matrix(m, n, c)?
        };
        let tracked = self.tape.tracked(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), tracked))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds a bias vector of length `cols` to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = bias.value();
            let (rows, cols) = a.dims2()?;
            if b.len() != cols || a.shape().len() != 2 {
                return Err(Error::shape("add_row", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            for r in 0..rows {
                for (x, y) in data[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let tracked = self.tape.tracked(&[self.id, bias.id]);
        Ok(self.tape.push(value, Op::AddRow(self.id, bias.id), tracked))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(|x| x * factor, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    /// Sum of all elements (`None`, scalar result) or along one axis of a
    /// matrix, keeping that axis with length one.
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            match axis {
                None => Tensor::scalar(a.sum()),
                Some(axis @ (0 | 1)) => {
                    let (rows, cols) = a.dims2()?;
                    if axis == 0 {
                        let mut s = vec![0.0; cols];
                        for r in 0..rows {
                            for (acc, v) in s.iter_mut().zip(&a.data()[r * cols..(r + 1) * cols]) {
                                *acc += v;
                            }
                        }
                        Tensor::matrix(1, cols, s)?
                    } else {
                        let s = (0..rows).map(|r| a.data()[r * cols..(r + 1) * cols].iter().sum()).collect();
                        Tensor::matrix(rows, 1, s)?
                    }
                }
                Some(axis) => return Err(Error::InvalidArgument(format!("sum axis {axis}"))),
            }
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::Sum { input: self.id, axis }, tracked))
    }

    /// Max-shifted softmax along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("softmax axis {axis}")));
        }
        let value = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            let x = a.data();
            let mut y = vec![0.0; rows * cols];
            let (outer, inner, idx): (usize, usize, fn(usize, usize, usize, usize) -> usize) =
                if axis == 1 {
                    (rows, cols, |o, i, _, cols| o * cols + i)
                } else {
                    (cols, rows, |o, i, _, cols| i * cols + o)
                };
            for o in 0..outer {
                let mut max = f64::NEG_INFINITY;
                for i in 0..inner {
                    max = max.max(x[idx(o, i, rows, cols)]);
                }
                let mut denom = 0.0;
                for i in 0..inner {
                    let j = idx(o, i, rows, cols);
                    y[j] = (x[j] - max).exp();
                    denom += y[j];
                }
                for i in 0..inner {
                    y[idx(o, i, rows, cols)] /= denom;
                }
            }
            Tensor::new(a.shape().to_vec(), y)?
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::Softmax { input: self.id, axis }, tracked))
    }

    /// Inverted dropout. Returns `self` unchanged when not training or when the rate is zero.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidDropout(rate));
        }
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 - rate;
        let (value, mask) = {
            let a = self.value();
            let mask: Vec<f64> = (0..a.len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::new(a.shape().to_vec(), data)?, mask)
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::Dropout { input: self.id, mask }, tracked))
    }

    /// Mean over consecutive groups of `group` rows: `[G·group × n] → [G × n]`.
    pub fn segment_mean(self, group: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            if group == 0 || rows % group != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{rows} rows cannot be split into groups of {group}"
                )));
            }
            let mut out = vec![0.0; rows / group * cols];
            for r in 0..rows {
                let o = (r / group) * cols;
                for (acc, v) in out[o..o + cols].iter_mut().zip(&a.data()[r * cols..(r + 1) * cols]) {
                    *acc += v;
                }
            }
            for v in &mut out {
                *v /= group as f64;
            }
            Tensor::matrix(rows / group, cols, out)?
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::SegmentMean { input: self.id, group }, tracked))
    }

    /// Applies a constant `[n × n]` matrix to each consecutive `n`-row block.
    pub fn block_left_mul(self, block: &Arc<Tensor>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            let (n, n2) = block.dims2()?;
            if n != n2 || n == 0 || rows % n != 0 {
                return Err(Error::shape("block_left_mul", block.shape(), a.shape()));
            }
            let mut out = vec![0.0; rows * cols];
            for b in 0..rows / n {
                let span = b * n * cols..(b + 1) * n * cols;
                gemm(n, n, cols, block.data(), &a.data()[span.clone()], &mut out[span], false);
            }
            Tensor::matrix(rows, cols, out)?
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::BlockLeftMul {
                input: self.id,
                block: Arc::clone(block),
            },
            tracked,
        ))
    }
}
