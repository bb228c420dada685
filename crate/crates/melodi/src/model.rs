//! Sandwich assembly: token embedding, N layers (short-term everywhere
//! except the configured long-term positions), final norm, and a tied output
//! head; plus per-window state threading and the baseline memory policies
//! (Transformer-XL cache, Memorizing-Transformer dense memory, none).

use crate::attention::xavier;
use crate::config::{MemoryPolicy, ModelConfig};
use crate::error::{MelodiError, Result};
use crate::long_term::{KVBlock, LongTermLayerParams, LongTermMemory};
use crate::short_term::{
    block_forward, init_summary, short_term_step, BlockParams, FwdCtx, MixerMatrix, Prefix,
    ShortTermLayerParams,
};
use crate::long_term::long_term_step;
use crate::tensor::{Parameter, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub enum Layer {
    /// Short-term layer with recurrent z compression.
    Short(ShortTermLayerParams),
    /// Long-term layer (short-term machinery plus memory cross-attention).
    Long(LongTermLayerParams),
    /// Plain block: baseline policies, or a melodi layer with its
    /// short-term memory disabled (no z attention, no mixers).
    Plain(BlockParams),
}

pub struct Model {
    pub cfg: ModelConfig,
    pub embedding: Tensor,
    pub summary_embedding: Option<Tensor>,
    pub layers: Vec<Layer>,
    pub final_ln_gain: Tensor,
    pub final_ln_offset: Tensor,
}

/// Per-layer short-term memory slot.
pub struct ShortSlot {
    pub z: Tensor,
    pub empty: bool,
}

/// All recurrent state threaded across windows.
pub struct ModelState {
    pub short: Vec<Option<ShortSlot>>,
    pub long: Vec<Option<LongTermMemory>>,
    pub xl_cache: Vec<Option<(Tensor, Tensor)>>,
    pub mt_memory: Option<LongTermMemory>,
    pub window_counter: usize,
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        if cfg.memory_policy == MemoryPolicy::Memorizing && cfg.long_term_layer_positions.is_empty()
        {
            return Err(MelodiError::InvalidConfig {
                field: "long_term_layer_positions".into(),
                message: "memorizing policy needs a designated memory layer".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = cfg.dim;
        let s = cfg.short_tokens;
        let u = cfg.summary_tokens();
        let w = cfg.window_len;
        let max_offset = 2 * w + 2 * s;

        let embedding = Tensor::param(vec![cfg.vocab_size, dim], xavier(cfg.vocab_size, dim, &mut rng));
        let summary_embedding = (cfg.memory_policy == MemoryPolicy::Melodi).then(|| {
            Tensor::param(
                vec![s, dim],
                (0..s * dim).map(|_| rng.gen_range(-0.02..0.02)).collect(),
            )
        });

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let is_long = cfg.long_term_layer_positions.contains(&i);
            let short_enabled = cfg.short_term_enabled_layers.contains(&i);
            let layer = match cfg.memory_policy {
                MemoryPolicy::Melodi => {
                    let block =
                        BlockParams::init(dim, cfg.heads, cfg.ffn_hidden, max_offset, is_long, &mut rng);
                    let mixers = |rng: &mut ChaCha8Rng| {
                        (
                            Some(MixerMatrix::init(w + u, s, w, rng)),
                            Some(MixerMatrix::init(w + u, s, w, rng)),
                        )
                    };
                    if is_long {
                        let (mix_up, mix_right) = if short_enabled && cfg.branching {
                            mixers(&mut rng)
                        } else {
                            (None, None)
                        };
                        let mix_long = (!cfg.copy_short_as_long)
                            .then(|| MixerMatrix::init(w + u, cfg.long_tokens, w, &mut rng));
                        Layer::Long(LongTermLayerParams {
                            short: ShortTermLayerParams { block, mix_up, mix_right },
                            mix_long,
                        })
                    } else if short_enabled {
                        let (mix_up, mix_right) = if cfg.branching {
                            mixers(&mut rng)
                        } else {
                            (None, None)
                        };
                        Layer::Short(ShortTermLayerParams { block, mix_up, mix_right })
                    } else {
                        Layer::Plain(block)
                    }
                }
                MemoryPolicy::Xl | MemoryPolicy::None => Layer::Plain(BlockParams::init(
                    dim,
                    cfg.heads,
                    cfg.ffn_hidden,
                    max_offset,
                    false,
                    &mut rng,
                )),
                MemoryPolicy::Memorizing => Layer::Plain(BlockParams::init(
                    dim,
                    cfg.heads,
                    cfg.ffn_hidden,
                    max_offset,
                    is_long,
                    &mut rng,
                )),
            };
            layers.push(layer);
        }

        Ok(Model {
            cfg: cfg.clone(),
            embedding,
            summary_embedding,
            layers,
            final_ln_gain: Tensor::param(vec![dim], vec![1.0; dim]),
            final_ln_offset: Tensor::param(vec![dim], vec![0.0; dim]),
        })
    }

    pub fn init_state(&self) -> ModelState {
        let n = self.cfg.n_layers;
        let mut short = Vec::with_capacity(n);
        let mut long = Vec::with_capacity(n);
        for layer in &self.layers {
            match layer {
                Layer::Short(_) | Layer::Long(_) => short.push(Some(ShortSlot {
                    z: Tensor::zeros(vec![self.cfg.short_tokens, self.cfg.dim]),
                    empty: true,
                })),
                Layer::Plain(_) => short.push(None),
            }
            match layer {
                Layer::Long(_) => {
                    let l = if self.cfg.copy_short_as_long {
                        self.cfg.short_tokens
                    } else {
                        self.cfg.long_tokens
                    };
                    long.push(Some(LongTermMemory::new(l, self.cfg.q_max, self.cfg.dim)));
                }
                _ => long.push(None),
            }
        }
        ModelState {
            short,
            long,
            xl_cache: vec![None; n],
            mt_memory: (self.cfg.memory_policy == MemoryPolicy::Memorizing).then(|| {
                LongTermMemory::new(self.cfg.window_len, self.cfg.q_max, self.cfg.dim)
            }),
            window_counter: 0,
        }
    }

    fn embed(&self, tokens: &[usize]) -> Tensor {
        let dim = self.cfg.dim;
        let mut idx = Vec::with_capacity(tokens.len() * dim);
        for &t in tokens {
            debug_assert!(t < self.cfg.vocab_size, "token id out of range");
            for c in 0..dim {
                idx.push(t * dim + c);
            }
        }
        self.embedding.gather(&idx, vec![tokens.len(), dim])
    }

    /// One context window: embeds, threads (z, x, u) through the layers per
    /// the memory policy, updates state, and returns logits for the W
    /// context positions (summary tokens produce no logits).
    pub fn forward_window(
        &self,
        state: &mut ModelState,
        tokens: &[usize],
        ctx: &FwdCtx,
    ) -> Result<Tensor> {
        if tokens.len() != self.cfg.window_len {
            return Err(MelodiError::ShapeMismatch {
                context: "forward_window token count",
                lhs: vec![tokens.len()],
                rhs: vec![self.cfg.window_len],
            });
        }
        if state.short.len() != self.cfg.n_layers {
            return Err(MelodiError::ShapeMismatch {
                context: "state/model geometry",
                lhs: vec![state.short.len()],
                rhs: vec![self.cfg.n_layers],
            });
        }
        let mut x = self.embed(tokens);
        let mut u = self.summary_embedding.as_ref().map(init_summary);
        let mt_layer = self.cfg.long_term_layer_positions.first().copied();

        for (i, layer) in self.layers.iter().enumerate() {
            match (layer, self.cfg.memory_policy) {
                (Layer::Short(p), _) => {
                    let slot = state.short[i].as_ref().expect("short slot");
                    let ut = u.as_ref().expect("summary tokens");
                    let (z_next, x_out, u_out) =
                        short_term_step(&slot.z, slot.empty, &x, ut, p, ctx)?;
                    state.short[i] = Some(ShortSlot {
                        z: if ctx.detach_state { z_next.detach() } else { z_next },
                        empty: false,
                    });
                    x = x_out;
                    u = Some(u_out);
                }
                (Layer::Long(p), _) => {
                    let slot = state.short[i].as_ref().expect("short slot");
                    let mem = state.long[i].as_mut().expect("long memory");
                    let ut = u.as_ref().expect("summary tokens");
                    let (z_next, x_out, u_out) = long_term_step(
                        mem,
                        &slot.z,
                        slot.empty,
                        &x,
                        ut,
                        p,
                        self.cfg.detach_long_kv,
                        self.cfg.copy_short_as_long,
                        ctx,
                    )?;
                    state.short[i] = Some(ShortSlot {
                        z: if ctx.detach_state { z_next.detach() } else { z_next },
                        empty: false,
                    });
                    x = x_out;
                    u = Some(u_out);
                }
                (Layer::Plain(block), MemoryPolicy::Xl) => {
                    let (x_out, cache) = xl_policy_step(state.xl_cache[i].as_ref(), &x, block, ctx)?;
                    state.xl_cache[i] = Some(cache);
                    x = x_out;
                }
                (Layer::Plain(block), MemoryPolicy::Memorizing) => {
                    if mt_layer == Some(i) {
                        let mem = state.mt_memory.as_mut().expect("mt memory");
                        let (x_out, cache) =
                            mt_policy_step(mem, state.xl_cache[i].as_ref(), &x, block, ctx)?;
                        state.xl_cache[i] = Some(cache);
                        x = x_out;
                    } else {
                        let (x_out, cache) =
                            xl_policy_step(state.xl_cache[i].as_ref(), &x, block, ctx)?;
                        state.xl_cache[i] = Some(cache);
                        x = x_out;
                    }
                }
                (Layer::Plain(block), _) => {
                    // policy none, or a melodi layer with short-term disabled:
                    // plain causal block; summary tokens (if any) pass through.
                    let out = block_forward(block, &x, u.as_ref(), Prefix::None, None, ctx)?;
                    x = out.x_out;
                    if u.is_some() {
                        u = out.u_hat;
                    }
                }
            }
        }

        state.window_counter += 1;
        let normed = x.layer_norm(&self.final_ln_gain, &self.final_ln_offset, crate::short_term::LN_EPS);
        normed.matmul(&self.embedding.transpose())
    }

    /// Iterates forward_window over a segment. Gradients flow through the
    /// short-term state across all windows of the segment.
    pub fn forward_segment(
        &self,
        state: &mut ModelState,
        windows: &[Vec<usize>],
        reset: bool,
        ctx: &FwdCtx,
    ) -> Result<Vec<Tensor>> {
        assert!(!windows.is_empty(), "segment needs at least one window");
        if reset {
            *state = self.init_state();
        }
        windows
            .iter()
            .map(|w| self.forward_window(state, w, ctx))
            .collect()
    }

    /// Named parameter registry (checkpoint order).
    pub fn params(&self) -> Vec<Parameter> {
        let mut out = vec![Parameter::new("embedding", self.embedding.clone())];
        if let Some(se) = &self.summary_embedding {
            out.push(Parameter::new("summary_embedding", se.clone()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            let block = match layer {
                Layer::Short(l) => &l.block,
                Layer::Long(l) => &l.short.block,
                Layer::Plain(b) => b,
            };
            out.push(Parameter::new(format!("{p}.attn.q_proj"), block.attn.q_proj.clone()));
            out.push(Parameter::new(format!("{p}.attn.k_proj"), block.attn.k_proj.clone()));
            out.push(Parameter::new(format!("{p}.attn.v_proj"), block.attn.v_proj.clone()));
            out.push(Parameter::new(format!("{p}.attn.out_proj"), block.attn.out_proj.clone()));
            out.push(Parameter::new(format!("{p}.attn.rel_bias"), block.attn.rel_bias.clone()));
            if let Some(a) = &block.attn.alpha_logits {
                out.push(Parameter::new(format!("{p}.attn.alpha_logits"), a.clone()));
            }
            out.push(Parameter::new(format!("{p}.ffn.w1"), block.ffn_w1.clone()));
            out.push(Parameter::new(format!("{p}.ffn.b1"), block.ffn_b1.clone()));
            out.push(Parameter::new(format!("{p}.ffn.w2"), block.ffn_w2.clone()));
            out.push(Parameter::new(format!("{p}.ffn.b2"), block.ffn_b2.clone()));
            out.push(Parameter::new(format!("{p}.ln1.gain"), block.ln1_gain.clone()));
            out.push(Parameter::new(format!("{p}.ln1.offset"), block.ln1_offset.clone()));
            out.push(Parameter::new(format!("{p}.ln2.gain"), block.ln2_gain.clone()));
            out.push(Parameter::new(format!("{p}.ln2.offset"), block.ln2_offset.clone()));
            let (mix_up, mix_right, mix_long) = match layer {
                Layer::Short(l) => (l.mix_up.as_ref(), l.mix_right.as_ref(), None),
                Layer::Long(l) => (l.short.mix_up.as_ref(), l.short.mix_right.as_ref(), l.mix_long.as_ref()),
                Layer::Plain(_) => (None, None, None),
            };
            if let Some(m) = mix_up {
                out.push(Parameter::new(format!("{p}.mix_up"), m.weights.clone()));
            }
            if let Some(m) = mix_right {
                out.push(Parameter::new(format!("{p}.mix_right"), m.weights.clone()));
            }
            if let Some(m) = mix_long {
                out.push(Parameter::new(format!("{p}.mix_long"), m.weights.clone()));
            }
        }
        out.push(Parameter::new("final_ln.gain", self.final_ln_gain.clone()));
        out.push(Parameter::new("final_ln.offset", self.final_ln_offset.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Total token-mixer parameters across all layers.
    pub fn mixer_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (a, b, c) = match l {
                    Layer::Short(l) => (l.mix_up.as_ref(), l.mix_right.as_ref(), None),
                    Layer::Long(l) => {
                        (l.short.mix_up.as_ref(), l.short.mix_right.as_ref(), l.mix_long.as_ref())
                    }
                    Layer::Plain(_) => (None, None, None),
                };
                [a, b, c]
                    .into_iter()
                    .flatten()
                    .map(|m| m.param_count())
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.tensor.zero_grad();
        }
    }
}

/// Transformer-XL step: attend over [previous window's cached K/V | current],
/// then replace the cache with this window's detached K/V.
pub fn xl_policy_step(
    cache: Option<&(Tensor, Tensor)>,
    x_in: &Tensor,
    block: &BlockParams,
    ctx: &FwdCtx,
) -> Result<(Tensor, (Tensor, Tensor))> {
    let prefix = match cache {
        Some((k, v)) => Prefix::ProjectedKv { k, v },
        None => Prefix::None,
    };
    let out = block_forward(block, x_in, None, prefix, None, ctx)?;
    let (k, v) = out.ctx_kv;
    Ok((out.x_out, (k.detach(), v.detach())))
}

/// Memorizing-Transformer step at the designated memory layer: XL self path
/// plus gated dense cross-attention over the FIFO of uncompressed per-window
/// KV pairs; appends this window's detached KV.
pub fn mt_policy_step(
    memory: &mut LongTermMemory,
    cache: Option<&(Tensor, Tensor)>,
    x_in: &Tensor,
    block: &BlockParams,
    ctx: &FwdCtx,
) -> Result<(Tensor, (Tensor, Tensor))> {
    let prefix = match cache {
        Some((k, v)) => Prefix::ProjectedKv { k, v },
        None => Prefix::None,
    };
    let gathered = (!memory.is_empty()).then(|| memory.gather_kv());
    let out = block_forward(
        block,
        x_in,
        None,
        prefix,
        gathered.as_ref().map(|(k, v)| (k, v)),
        ctx,
    )?;
    let (k, v) = out.ctx_kv;
    let (k, v) = (k.detach(), v.detach());
    memory.append(KVBlock {
        keys: k.clone(),
        values: v.clone(),
        window_index: memory.next_window_index(),
    })?;
    Ok((out.x_out, (k, v)))
}
