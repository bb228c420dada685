//! Short-term recurrent compression layer: a shared transformer block over
//! [z_prev | x | u] followed by two linear token mixers that branch the
//! block output into next-layer summary tokens and next-window short-term
//! memory.

use crate::attention::{
    attend_heads, build_mask, build_mask_empty_prefix, relative_bias, xavier, AttentionParams,
    TokenLayout,
};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::cell::Cell;

/// Linear token mixer: combines the W+U block-output tokens per channel
/// into `out_len` tokens. No channel mixing.
pub struct MixerMatrix {
    /// (W+U) x out_len
    pub weights: Tensor,
}

impl MixerMatrix {
    pub fn init<R: Rng>(in_len: usize, out_len: usize, identity_rows_at: usize, rng: &mut R) -> Self {
        // Small noise plus an identity-like copy of the u-hat block so the
        // layer starts near the no-branching behavior.
        let mut w: Vec<f64> = (0..in_len * out_len).map(|_| rng.gen_range(-0.02..0.02)).collect();
        for i in 0..out_len.min(in_len.saturating_sub(identity_rows_at)) {
            w[(identity_rows_at + i) * out_len + i] += 1.0;
        }
        MixerMatrix {
            weights: Tensor::param(vec![in_len, out_len], w),
        }
    }

    pub fn in_len(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_len(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

/// Shared transformer block parameters (attention + FFN + pre-layer norms).
pub struct BlockParams {
    pub attn: AttentionParams,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_offset: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_offset: Tensor,
}

pub const LN_EPS: f64 = 1e-6;

impl BlockParams {
    pub fn init<R: Rng>(
        dim: usize,
        heads: usize,
        hidden: usize,
        max_offset: usize,
        gated: bool,
        rng: &mut R,
    ) -> Self {
        BlockParams {
            attn: AttentionParams::init(dim, heads, max_offset, gated, rng),
            ffn_w1: Tensor::param(vec![dim, hidden], xavier(dim, hidden, rng)),
            ffn_b1: Tensor::param(vec![hidden], vec![0.0; hidden]),
            ffn_w2: Tensor::param(vec![hidden, dim], xavier(hidden, dim, rng)),
            ffn_b2: Tensor::param(vec![dim], vec![0.0; dim]),
            ln1_gain: Tensor::param(vec![dim], vec![1.0; dim]),
            ln1_offset: Tensor::param(vec![dim], vec![0.0; dim]),
            ln2_gain: Tensor::param(vec![dim], vec![1.0; dim]),
            ln2_offset: Tensor::param(vec![dim], vec![0.0; dim]),
        }
    }

    /// Key/value projection used both inside the block and when storing
    /// compressed tokens into long-term memory (shared parameters).
    pub fn kv_project(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let normed = tokens.layer_norm(&self.ln1_gain, &self.ln1_offset, LN_EPS);
        Ok((
            normed.matmul(&self.attn.k_proj)?,
            normed.matmul(&self.attn.v_proj)?,
        ))
    }
}

/// Memory prefix handed to the block.
pub enum Prefix<'a> {
    /// No prefix at all (plain causal block).
    None,
    /// Short-term memory tokens; `empty` masks them out (first window).
    Tokens { z: &'a Tensor, empty: bool },
    /// Already-projected key/value rows (Transformer-XL style cache).
    ProjectedKv { k: &'a Tensor, v: &'a Tensor },
}

/// Deterministic dropout stream keyed by (seed, step); each mask draw
/// advances a counter so the same call sequence replays the same masks.
pub struct DropoutStream {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
    counter: Cell<u64>,
}

impl DropoutStream {
    pub fn new(rate: f64, seed: u64, step: u64) -> Self {
        DropoutStream {
            rate,
            seed,
            step,
            counter: Cell::new(0),
        }
    }

    fn mask(&self, len: usize) -> Vec<bool> {
        let c = self.counter.get();
        self.counter.set(c + 1);
        let key = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(self.step.wrapping_mul(0xbf58476d1ce4e5b9))
            .wrapping_add(c.wrapping_mul(0x94d049bb133111eb));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..len).map(|_| rng.gen::<f64>() >= self.rate).collect()
    }
}

/// Forward context: dropout is active only while training, and
/// `detach_state` controls whether recurrent state carried across windows
/// keeps its autodiff graph (it must for BPTT, must not for evaluation).
#[derive(Default)]
pub struct FwdCtx {
    pub dropout: Option<DropoutStream>,
    pub detach_state: bool,
}

impl FwdCtx {
    pub fn eval() -> Self {
        FwdCtx { dropout: None, detach_state: true }
    }

    pub fn train(rate: f64, seed: u64, step: u64) -> Self {
        FwdCtx {
            dropout: (rate > 0.0).then(|| DropoutStream::new(rate, seed, step)),
            detach_state: false,
        }
    }

    fn apply(&self, t: Tensor) -> Tensor {
        match &self.dropout {
            Some(d) => {
                let keep = d.mask(t.len());
                t.dropout_with_mask(&keep, 1.0 - d.rate)
            }
            None => t,
        }
    }
}

/// Output of one block pass.
pub struct BlockOutput {
    pub x_out: Tensor,
    /// Present iff summary tokens were passed in.
    pub u_hat: Option<Tensor>,
    /// Projected K/V of the context tokens (for XL-style caching).
    pub ctx_kv: (Tensor, Tensor),
}

/// One pre-LN transformer block over [prefix | x | u]. Queries are the W+U
/// context+summary tokens; the prefix is read-only context (residuals never
/// touch it). `cross_kv` adds a gated cross-attention path over external
/// key/value rows (long-term memory), merged per head before out_proj.
pub fn block_forward(
    block: &BlockParams,
    x_in: &Tensor,
    u_in: Option<&Tensor>,
    prefix: Prefix<'_>,
    cross_kv: Option<(&Tensor, &Tensor)>,
    ctx: &FwdCtx,
) -> Result<BlockOutput> {
    let w = x_in.rows();
    let u = u_in.map_or(0, |t| t.rows());
    let h = match u_in {
        Some(ut) => Tensor::concat_rows(&[x_in.clone(), ut.clone()]),
        None => x_in.clone(),
    };

    let (kv_tokens, token_prefix_len, prefix_empty) = match &prefix {
        Prefix::Tokens { z, empty } => (
            Tensor::concat_rows(&[(*z).clone(), h.clone()]),
            z.rows(),
            *empty,
        ),
        _ => (h.clone(), 0, false),
    };

    let normed = kv_tokens.layer_norm(&block.ln1_gain, &block.ln1_offset, LN_EPS);
    let q_src = normed.slice_rows(token_prefix_len, w + u);
    let queries = q_src.matmul(&block.attn.q_proj)?;
    let keys_cur = normed.matmul(&block.attn.k_proj)?;
    let values_cur = normed.matmul(&block.attn.v_proj)?;

    let (keys, values, prefix_len) = match &prefix {
        Prefix::ProjectedKv { k, v } => (
            Tensor::concat_rows(&[(*k).clone(), keys_cur.clone()]),
            Tensor::concat_rows(&[(*v).clone(), values_cur.clone()]),
            k.rows(),
        ),
        _ => (keys_cur.clone(), values_cur.clone(), token_prefix_len),
    };

    let layout = TokenLayout::new(prefix_len, w, u);
    let mask = if prefix_empty {
        build_mask_empty_prefix(layout)
    } else {
        build_mask(layout)
    };
    let bias = relative_bias(layout, &block.attn);
    let self_heads = attend_heads(&queries, &keys, &values, Some(&mask), Some(&bias), block.attn.heads)?;

    let merged = match cross_kv {
        Some((mk, mv)) => {
            let alpha = block
                .attn
                .alpha_logits
                .as_ref()
                .expect("cross attention requires alpha gates");
            let cross_heads = attend_heads(&queries, mk, mv, None, None, block.attn.heads)?;
            Tensor::gated_merge(&self_heads, &cross_heads, alpha, block.attn.heads)?
        }
        None => self_heads,
    };

    let attn_out = ctx.apply(merged.matmul(&block.attn.out_proj)?);
    let h2 = h.add(&attn_out);

    let f = h2.layer_norm(&block.ln2_gain, &block.ln2_offset, LN_EPS);
    let ffn = f
        .matmul(&block.ffn_w1)?
        .add_row(&block.ffn_b1)
        .gelu()
        .matmul(&block.ffn_w2)?
        .add_row(&block.ffn_b2);
    let h3 = h2.add(&ctx.apply(ffn));

    let x_out = h3.slice_rows(0, w);
    let u_hat = (u > 0).then(|| h3.slice_rows(w, u));
    let ctx_kv = (
        keys_cur.slice_rows(token_prefix_len, w),
        values_cur.slice_rows(token_prefix_len, w),
    );
    Ok(BlockOutput { x_out, u_hat, ctx_kv })
}

/// Short-term layer parameters; mixers are absent when summary branching is
/// disabled (the no-branching ablation shares u-hat for both outputs).
pub struct ShortTermLayerParams {
    pub block: BlockParams,
    pub mix_up: Option<MixerMatrix>,
    pub mix_right: Option<MixerMatrix>,
}

/// mixer^T . [x_out; u_hat] — pure token mixing across each channel.
pub fn token_mix(x_out: &Tensor, u_hat: &Tensor, mixer: &MixerMatrix) -> Result<Tensor> {
    let stacked = Tensor::concat_rows(&[x_out.clone(), u_hat.clone()]);
    assert_eq!(
        mixer.in_len(),
        stacked.rows(),
        "mixer input extent mismatch"
    );
    mixer.weights.transpose().matmul(&stacked)
}

/// The spec's transformer_block over (x, u | z): returns transformed context
/// tokens and intermediate summary tokens.
pub fn transformer_block(
    x_in: &Tensor,
    u_in: &Tensor,
    z_prev: &Tensor,
    z_empty: bool,
    params: &ShortTermLayerParams,
    ctx: &FwdCtx,
) -> Result<(Tensor, Tensor)> {
    let out = block_forward(
        &params.block,
        x_in,
        Some(u_in),
        Prefix::Tokens { z: z_prev, empty: z_empty },
        None,
        ctx,
    )?;
    Ok((out.x_out, out.u_hat.expect("summary tokens present")))
}

/// Full short-term step: block + summary branching. With branching disabled
/// both outputs are the shared u-hat.
pub fn short_term_step(
    z_prev: &Tensor,
    z_empty: bool,
    x_in: &Tensor,
    u_in: &Tensor,
    params: &ShortTermLayerParams,
    ctx: &FwdCtx,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (x_out, u_hat) = transformer_block(x_in, u_in, z_prev, z_empty, params, ctx)?;
    match (&params.mix_up, &params.mix_right) {
        (Some(up), Some(right)) => {
            let u_out = token_mix(&x_out, &u_hat, up)?;
            let z_next = token_mix(&x_out, &u_hat, right)?;
            Ok((z_next, x_out, u_out))
        }
        _ => Ok((u_hat.clone(), x_out, u_hat)),
    }
}

/// Learnable initial summary tokens, identical for every window.
pub fn init_summary(embedding: &Tensor) -> Tensor {
    embedding.clone()
}
