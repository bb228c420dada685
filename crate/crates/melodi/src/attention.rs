//! Causal multi-head attention over a [memory prefix | context | summary]
//! token layout, with learned per-head relative position bias and the
//! per-head gated merge used by the long-term layer.
//!
//! Positions on the concatenated axis: memory prefix at -S..-1, context at
//! 0..W-1, summary at W..W+U-1. Cross-attention to long-term memory uses no
//! position bias and no mask; the stored KV pairs are treated as an
//! unordered store.

use crate::error::{MelodiError, Result};
use crate::tensor::{Mask, Tensor};
use rand::Rng;

/// Token counts for one window at one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    /// Short-term memory tokens z (S).
    pub prefix_len: usize,
    /// Context tokens x (W).
    pub ctx_len: usize,
    /// Summary tokens u (U).
    pub summary_len: usize,
}

impl TokenLayout {
    pub fn new(prefix_len: usize, ctx_len: usize, summary_len: usize) -> Self {
        TokenLayout {
            prefix_len,
            ctx_len,
            summary_len,
        }
    }

    pub fn queries(&self) -> usize {
        self.ctx_len + self.summary_len
    }

    pub fn keys(&self) -> usize {
        self.prefix_len + self.ctx_len + self.summary_len
    }
}

/// Projection weights plus the relative-bias table; `alpha_logits` is
/// present only on the long-term layer.
pub struct AttentionParams {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub out_proj: Tensor,
    /// heads x (2*max_offset+1) learned bias per clipped relative offset.
    pub rel_bias: Tensor,
    pub alpha_logits: Option<Tensor>,
    pub heads: usize,
    pub dim: usize,
    pub max_offset: usize,
}

impl AttentionParams {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn init<R: Rng>(
        dim: usize,
        heads: usize,
        max_offset: usize,
        gated: bool,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "heads must divide dim");
        let proj = |rng: &mut R| Tensor::param(vec![dim, dim], xavier(dim, dim, rng));
        AttentionParams {
            q_proj: proj(rng),
            k_proj: proj(rng),
            v_proj: proj(rng),
            out_proj: proj(rng),
            rel_bias: Tensor::param(vec![heads, 2 * max_offset + 1], vec![0.0; heads * (2 * max_offset + 1)]),
            // Start with the cross path mostly closed (alpha = sigmoid(-2) ≈
            // 0.12): early in training the memory content is noise, and an
            // even mix visibly slows the self path's progress. The gates open
            // on their own once the memory becomes predictive.
            alpha_logits: gated.then(|| Tensor::param(vec![heads], vec![-2.0; heads])),
            heads,
            dim,
            max_offset,
        }
    }
}

pub fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// Causal mask for the combined [prefix | context | summary] sequence.
/// Every query sees the whole memory prefix; context query i sees context
/// keys <= i and no summary keys; summary query j sees all context keys and
/// summary keys <= j.
pub fn build_mask(layout: TokenLayout) -> Mask {
    build_mask_inner(layout, true)
}

/// Same mask with the memory prefix blocked (first window, empty memory).
pub fn build_mask_empty_prefix(layout: TokenLayout) -> Mask {
    build_mask_inner(layout, false)
}

fn build_mask_inner(layout: TokenLayout, prefix_visible: bool) -> Mask {
    let (s, w, u) = (layout.prefix_len, layout.ctx_len, layout.summary_len);
    let (q, k) = (layout.queries(), layout.keys());
    let mut allowed = vec![false; q * k];
    for qi in 0..q {
        let row = &mut allowed[qi * k..(qi + 1) * k];
        if prefix_visible {
            row[..s].fill(true);
        }
        if qi < w {
            // context query at position qi
            row[s..s + qi + 1].fill(true);
        } else {
            // summary query qi - w
            row[s..s + w].fill(true);
            row[s + w..s + w + (qi - w) + 1].fill(true);
        }
        let _ = u;
    }
    Mask::new(q, k, allowed)
}

/// Per-head bias matrices [(W+U) x (S+W+U)] gathered from the learned
/// offset table; bias[h][i][j] = table[h, clip(pos_j - pos_i)].
pub fn relative_bias(layout: TokenLayout, params: &AttentionParams) -> Vec<Tensor> {
    let (q, k) = (layout.queries(), layout.keys());
    let buckets = 2 * params.max_offset + 1;
    let mut head_bias = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let mut idx = Vec::with_capacity(q * k);
        for qi in 0..q {
            let pos_i = qi as i64; // queries are context+summary, positions 0..W+U-1
            for kj in 0..k {
                let pos_j = kj as i64 - layout.prefix_len as i64;
                let off = (pos_j - pos_i).clamp(-(params.max_offset as i64), params.max_offset as i64);
                idx.push(h * buckets + (off + params.max_offset as i64) as usize);
            }
        }
        head_bias.push(params.rel_bias.gather(&idx, vec![q, k]));
    }
    head_bias
}

/// Per-head scaled dot-product attention; returns the concatenated head
/// outputs, before the output projection.
pub fn attend_heads(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: Option<&Mask>,
    bias: Option<&[Tensor]>,
    heads: usize,
) -> Result<Tensor> {
    if keys.rows() != values.rows() || keys.cols() != values.cols() {
        return Err(MelodiError::ShapeMismatch {
            context: "attend key/value counts",
            lhs: keys.shape().to_vec(),
            rhs: values.shape().to_vec(),
        });
    }
    let dim = queries.cols();
    assert_eq!(dim % heads, 0);
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = queries.slice_cols(h * hd, hd);
        let kh = keys.slice_cols(h * hd, hd);
        let vh = values.slice_cols(h * hd, hd);
        let mut scores = qh.matmul(&kh.transpose())?.scale(scale);
        if let Some(b) = bias {
            scores = scores.add(&b[h]);
        }
        let probs = scores.softmax_rows(mask)?;
        outs.push(probs.matmul(&vh)?);
    }
    Ok(Tensor::concat_cols(&outs))
}

/// Full attention: per-head softmax(QK^T/sqrt(hd) + bias) V, heads
/// concatenated, then out-projected.
pub fn attend(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: Option<&Mask>,
    bias: Option<&[Tensor]>,
    params: &AttentionParams,
) -> Result<Tensor> {
    attend_heads(queries, keys, values, mask, bias, params.heads)?.matmul(&params.out_proj)
}
