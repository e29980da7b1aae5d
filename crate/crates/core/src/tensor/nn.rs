//! Neural building blocks shared by the news and user encoders.
//!
//! These are *composites*: each is expressed entirely in terms of the tape's
//! primitive operations, so reverse-mode gradients come for free and a single
//! set of primitive adjoints covers the whole encoder zoo.
//!
//! All sequence inputs are `[L × d]` matrices with a row-level `mask`
//! (`true` = real entry, `false` = padding). Masked positions never influence
//! the output of attention blocks, and recurrences carry their state across
//! masked steps unchanged.

use super::param::{ParamBuilder, ParamId, ParamSet};
use super::tape::{NodeId, Tape};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Parameters of an additive-attention pooling block.
///
/// Scores are `q · tanh(h W + b)` per sequence row `h`, normalized with a
/// masked softmax; the output is the weighted sum of rows.
#[derive(Debug, Clone, Copy)]
pub struct AddAttParams {
    /// Projection `[d_in × d_query]`.
    pub w: ParamId,
    /// Bias `[1 × d_query]`.
    pub b: ParamId,
    /// Query vector `[d_query × 1]`.
    pub q: ParamId,
}

impl AddAttParams {
    /// Declare the block's parameters under `prefix`.
    pub fn build<R: Real>(
        pb: &mut ParamBuilder<R>,
        prefix: &str,
        d_in: usize,
        d_query: usize,
    ) -> Result<Self> {
        if d_in == 0 || d_query == 0 {
            return Err(Error::Config(format!(
                "additive attention '{prefix}' needs positive dimensions, got d_in={d_in}, d_query={d_query}"
            )));
        }
        Ok(AddAttParams {
            w: pb.param(&format!("{prefix}.w"), &[d_in, d_query], d_in)?,
            b: pb.param(&format!("{prefix}.b"), &[1, d_query], d_query)?,
            q: pb.param(&format!("{prefix}.q"), &[d_query, 1], d_query)?,
        })
    }
}

/// Additive-attention pooling of `seq` `[L × d]` into `[1 × d]`.
///
/// `extra` is an optional `[1 × d_query]` term added inside the tanh for
/// every row — used by the candidate-aware user encoder, whose scores are
/// `q · tanh(h W + n_c V + b)`.
///
/// Returns `(pooled [1 × d], weights [1 × L])`. Weights of masked rows are
/// exactly zero; a fully masked sequence is a degenerate input.
pub fn additive_attention_pool<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamSet<R>,
    seq: NodeId,
    mask: &[bool],
    p: &AddAttParams,
    extra: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let l = tape.value(seq).rows();
    if mask.len() != l {
        return Err(Error::Usage(format!(
            "additive attention: mask has {} entries for {} rows",
            mask.len(),
            l
        )));
    }
    let w = tape.param(params, p.w);
    let b = tape.param(params, p.b);
    let q = tape.param(params, p.q);
    let mut h = tape.matmul(seq, w)?;
    h = tape.add_row(h, b)?;
    if let Some(e) = extra {
        h = tape.add_row(h, e)?;
    }
    let a = tape.tanh(h)?;
    let logits = tape.matmul(a, q)?;
    let row = tape.transpose(logits)?;
    let weights = tape.softmax_masked(row, mask)?;
    let pooled = tape.matmul(weights, seq)?;
    Ok((pooled, weights))
}

/// Parameters of a multi-head self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhsaParams {
    /// Query projection `[d_in × d_out]`.
    pub wq: ParamId,
    /// Key projection `[d_in × d_out]`.
    pub wk: ParamId,
    /// Value projection `[d_in × d_out]`.
    pub wv: ParamId,
    /// Number of attention heads; must divide `d_out`.
    pub heads: usize,
    /// Output width.
    pub d_out: usize,
}

impl MhsaParams {
    /// Declare the block's parameters under `prefix`.
    pub fn build<R: Real>(
        pb: &mut ParamBuilder<R>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config(format!("self-attention '{prefix}': heads must be positive")));
        }
        if d_out % heads != 0 {
            return Err(Error::Config(format!(
                "self-attention '{prefix}': output dim {d_out} is not divisible by {heads} heads"
            )));
        }
        Ok(MhsaParams {
            wq: pb.param(&format!("{prefix}.wq"), &[d_in, d_out], d_in)?,
            wk: pb.param(&format!("{prefix}.wk"), &[d_in, d_out], d_in)?,
            wv: pb.param(&format!("{prefix}.wv"), &[d_in, d_out], d_in)?,
            heads,
            d_out,
        })
    }
}

/// Multi-head scaled dot-product self-attention over `seq` `[L × d_in]`,
/// producing `[L × d_out]`.
///
/// Masked positions are excluded as keys (zero attention weight everywhere)
/// and their output rows are forced to zero, so padding can never leak into
/// downstream pooling.
pub fn multi_head_self_attention<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamSet<R>,
    seq: NodeId,
    mask: &[bool],
    p: &MhsaParams,
) -> Result<NodeId> {
    let l = tape.value(seq).rows();
    if mask.len() != l {
        return Err(Error::Usage(format!(
            "self-attention: mask has {} entries for {} rows",
            mask.len(),
            l
        )));
    }
    let wq = tape.param(params, p.wq);
    let wk = tape.param(params, p.wk);
    let wv = tape.param(params, p.wv);
    let q = tape.matmul(seq, wq)?;
    let k = tape.matmul(seq, wk)?;
    let v = tape.matmul(seq, wv)?;

    let d_head = p.d_out / p.heads;
    let scale = R::of(1.0 / (d_head as f64).sqrt());
    // Every query row attends over the same set of unmasked keys.
    let mut key_mask = Vec::with_capacity(l * l);
    for _ in 0..l {
        key_mask.extend_from_slice(mask);
    }

    let mut head_outputs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.softmax_masked(scaled, &key_mask)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_cols(&head_outputs)?;

    // Zero the output rows of masked queries.
    let row_gate = Tensor::from_fn(l, p.d_out, |i, _| if mask[i] { R::one() } else { R::zero() });
    let gate = tape.input(row_gate);
    tape.mul(ctx, gate)
}

/// Parameters of a gated recurrent unit.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    /// Update-gate input projection `[d_in × d_h]`.
    pub wz: ParamId,
    /// Update-gate state projection `[d_h × d_h]`.
    pub uz: ParamId,
    /// Update-gate bias `[1 × d_h]`.
    pub bz: ParamId,
    /// Reset-gate input projection.
    pub wr: ParamId,
    /// Reset-gate state projection.
    pub ur: ParamId,
    /// Reset-gate bias.
    pub br: ParamId,
    /// Candidate input projection.
    pub wh: ParamId,
    /// Candidate state projection.
    pub uh: ParamId,
    /// Candidate bias.
    pub bh: ParamId,
    /// Hidden width.
    pub d_h: usize,
}

impl GruParams {
    /// Declare the cell's parameters under `prefix`.
    pub fn build<R: Real>(pb: &mut ParamBuilder<R>, prefix: &str, d_in: usize, d_h: usize) -> Result<Self> {
        if d_in == 0 || d_h == 0 {
            return Err(Error::Config(format!(
                "gru '{prefix}' needs positive dimensions, got d_in={d_in}, d_h={d_h}"
            )));
        }
        let p = |pb: &mut ParamBuilder<R>, n: &str, shape: &[usize], fan: usize| {
            pb.param(&format!("{prefix}.{n}"), shape, fan)
        };
        Ok(GruParams {
            wz: p(pb, "wz", &[d_in, d_h], d_in)?,
            uz: p(pb, "uz", &[d_h, d_h], d_h)?,
            bz: p(pb, "bz", &[1, d_h], d_h)?,
            wr: p(pb, "wr", &[d_in, d_h], d_in)?,
            ur: p(pb, "ur", &[d_h, d_h], d_h)?,
            br: p(pb, "br", &[1, d_h], d_h)?,
            wh: p(pb, "wh", &[d_in, d_h], d_in)?,
            uh: p(pb, "uh", &[d_h, d_h], d_h)?,
            bh: p(pb, "bh", &[1, d_h], d_h)?,
            d_h,
        })
    }
}

/// Unrolled GRU over `seq` `[L × d_in]` starting from `h0` `[1 × d_h]`.
///
/// Uses the standard gate equations
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `h̃ = tanh(x Wh + (r ⊙ h) Uh + bh)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
///
/// Masked steps carry the state through unchanged. Returns one state per
/// input row (masked rows repeat the carried state) plus the final state;
/// with every step masked the final state is `h0` itself.
pub fn gru_forward<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamSet<R>,
    seq: NodeId,
    mask: &[bool],
    h0: NodeId,
    p: &GruParams,
) -> Result<(Vec<NodeId>, NodeId)> {
    let l = tape.value(seq).rows();
    if mask.len() != l {
        return Err(Error::Usage(format!("gru: mask has {} entries for {} rows", mask.len(), l)));
    }
    if tape.value(h0).rows() != 1 || tape.value(h0).cols() != p.d_h {
        return Err(Error::ShapeMismatch {
            op: "gru_forward",
            lhs: tape.value(h0).shape().to_vec(),
            rhs: vec![1, p.d_h],
        });
    }
    let wz = tape.param(params, p.wz);
    let uz = tape.param(params, p.uz);
    let bz = tape.param(params, p.bz);
    let wr = tape.param(params, p.wr);
    let ur = tape.param(params, p.ur);
    let br = tape.param(params, p.br);
    let wh = tape.param(params, p.wh);
    let uh = tape.param(params, p.uh);
    let bh = tape.param(params, p.bh);
    let ones = tape.input(Tensor::from_fn(1, p.d_h, |_, _| R::one()));

    let mut h = h0;
    let mut states = Vec::with_capacity(l);
    for t in 0..l {
        if !mask[t] {
            states.push(h);
            continue;
        }
        let x = tape.slice_rows(seq, t, 1)?;

        let xz = tape.matmul(x, wz)?;
        let hz = tape.matmul(h, uz)?;
        let mut z = tape.add(xz, hz)?;
        z = tape.add(z, bz)?;
        let z = tape.sigmoid(z)?;

        let xr = tape.matmul(x, wr)?;
        let hr = tape.matmul(h, ur)?;
        let mut r = tape.add(xr, hr)?;
        r = tape.add(r, br)?;
        let r = tape.sigmoid(r)?;

        let rh = tape.mul(r, h)?;
        let xh = tape.matmul(x, wh)?;
        let rhu = tape.matmul(rh, uh)?;
        let mut cand = tape.add(xh, rhu)?;
        cand = tape.add(cand, bh)?;
        let cand = tape.tanh(cand)?;

        let keep = tape.sub(ones, z)?;
        let kept = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        h = tape.add(kept, new)?;
        states.push(h);
    }
    Ok((states, h))
}
