use std::sync::Arc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::PairSet;

use super::params::{GruParams, GtnLayerParams, LinearParams};

/// One GRU step applied to every row (node) with shared weights.
///
/// `x_t` is `[M × F]`, `h_prev` is `[M × H]`:
/// `r = σ([h, x]W_r + b_r)`, `z = σ([h, x]W_z + b_z)`,
/// `h̃ = tanh([r∗h, x]W_h + b_h)`, `h' = (1 − z)∗h + z∗h̃`.
pub fn gru_step<'t>(x_t: Var<'t>, h_prev: Var<'t>, p: &GruParams<'t>) -> Result<Var<'t>> {
    x_t.tape().gru_cell(x_t, h_prev, [p.w_r, p.w_z, p.w_h], [p.b_r, p.b_z, p.b_h])
}

/// Folds [`gru_step`] over a sequence of `[M × F]` inputs from `h_0 = 0` and
/// returns the final hidden state.
pub fn gru_encode<'t>(xs: &[Var<'t>], p: &GruParams<'t>) -> Result<Var<'t>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("GRU input has no time steps".into()))?;
    let rows = first.value().dims2()?.0;
    let hidden = p.b_z.value().len();
    let mut h = first.tape().constant(Tensor::zeros(&[rows, hidden]));
    for &x in xs {
        h = gru_step(x, h, p)?;
    }
    Ok(h)
}

/// `ReLU(Â H W)` with `Â = D̃^{-1/2} Ã D̃^{-1/2}` applied to each graph of a
/// batch stacked as `[B·N × H_in]`.
pub fn gcn_layer<'t>(h: Var<'t>, a_hat: &Arc<Tensor>, w: Var<'t>) -> Result<Var<'t>> {
    Ok(h.matmul(w)?.block_left_mul(a_hat)?.relu())
}

/// Multi-head graph-transformer layer over the pairs of `pairs`.
///
/// Returns the `[B·N × C·d]` output and the attention weights, indexed
/// `(b·P + p)·C + c` for pair `p` of graph `b` and head `c`.
pub fn gtn_layer<'t>(h: Var<'t>, pairs: &PairSet, p: &GtnLayerParams<'t>) -> Result<(Var<'t>, Vec<f64>)> {
    let tape: &'t Tape = h.tape();
    let q = h.matmul(p.w_q)?.add_row(p.b_q)?;
    let k = h.matmul(p.w_k)?.add_row(p.b_k)?;
    let v = h.matmul(p.w_v)?.add_row(p.b_v)?;
    let edge = match p.edge {
        Some((w_e, b_e)) => Some(tape.constant(pairs.features.clone()).matmul(w_e)?.add_row(b_e)?),
        None => None,
    };
    tape.graph_attention(q, k, v, edge, &pairs.layout, p.heads)
}

pub fn linear<'t>(x: Var<'t>, p: &LinearParams<'t>) -> Result<Var<'t>> {
    x.matmul(p.w)?.add_row(p.b)
}
