//! Long-term memory: a FIFO queue of per-window compressed key-value blocks
//! plus the single long-term layer that cross-attends to it, merges the two
//! attention paths per head, and appends one new compressed block per
//! window.

use crate::error::{MelodiError, Result};
use crate::short_term::{block_forward, token_mix, FwdCtx, MixerMatrix, Prefix, ShortTermLayerParams};
use crate::tensor::Tensor;
use std::collections::VecDeque;
use std::io::{Read, Write};

/// Compressed key-value pairs for one window.
pub struct KVBlock {
    pub keys: Tensor,
    pub values: Tensor,
    pub window_index: usize,
}

/// FIFO of compressed KV blocks, oldest first, capacity `q_max` windows.
pub struct LongTermMemory {
    queue: VecDeque<KVBlock>,
    pub q_max: usize,
    pub dim: usize,
    /// Tokens stored per window (L; W for the Memorizing-Transformer policy).
    pub tokens_per_window: usize,
    appended: usize,
}

impl LongTermMemory {
    pub fn new(tokens_per_window: usize, q_max: usize, dim: usize) -> Self {
        LongTermMemory {
            queue: VecDeque::new(),
            q_max,
            dim,
            tokens_per_window,
            appended: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn stored_pairs(&self) -> usize {
        self.queue.iter().map(|b| b.keys.rows()).sum()
    }

    /// Maximum floats the queue can hold (KV pairs: 2 vectors per token).
    pub fn capacity_floats(&self) -> usize {
        self.tokens_per_window * 2 * self.dim * self.q_max
    }

    pub fn blocks(&self) -> impl Iterator<Item = &KVBlock> {
        self.queue.iter()
    }

    pub fn next_window_index(&self) -> usize {
        self.appended
    }

    /// Appends one block, evicting the oldest when over capacity.
    pub fn append(&mut self, block: KVBlock) -> Result<()> {
        if block.keys.shape() != block.values.shape()
            || block.keys.cols() != self.dim
            || block.keys.rows() != self.tokens_per_window
        {
            return Err(MelodiError::ShapeMismatch {
                context: "long-term memory block geometry",
                lhs: block.keys.shape().to_vec(),
                rhs: vec![self.tokens_per_window, self.dim],
            });
        }
        if let Some(last) = self.queue.back() {
            debug_assert!(block.window_index > last.window_index);
        }
        self.queue.push_back(block);
        self.appended += 1;
        while self.queue.len() > self.q_max {
            self.queue.pop_front();
        }
        Ok(())
    }

    /// Concatenated keys/values in queue order; zero-row tensors when empty.
    pub fn gather_kv(&self) -> (Tensor, Tensor) {
        if self.queue.is_empty() {
            return (Tensor::zeros(vec![0, self.dim]), Tensor::zeros(vec![0, self.dim]));
        }
        let keys: Vec<Tensor> = self.queue.iter().map(|b| b.keys.clone()).collect();
        let values: Vec<Tensor> = self.queue.iter().map(|b| b.values.clone()).collect();
        (Tensor::concat_rows(&keys), Tensor::concat_rows(&values))
    }

    /// Deep copy with detached contents (eval checkpointing).
    pub fn snapshot(&self) -> Self {
        LongTermMemory {
            queue: self
                .queue
                .iter()
                .map(|b| KVBlock {
                    keys: b.keys.detach(),
                    values: b.values.detach(),
                    window_index: b.window_index,
                })
                .collect(),
            q_max: self.q_max,
            dim: self.dim,
            tokens_per_window: self.tokens_per_window,
            appended: self.appended,
        }
    }

    /// Snapshot wire format: header (L, q_max, dim, count as LE u64) then
    /// blocks in order (window_index u64, keys f32 LE, values f32 LE).
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in [
            self.tokens_per_window as u64,
            self.q_max as u64,
            self.dim as u64,
            self.queue.len() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for b in &self.queue {
            w.write_all(&(b.window_index as u64).to_le_bytes())?;
            for t in [&b.keys, &b.values] {
                for x in t.data().iter() {
                    w.write_all(&(*x as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let l = read_u64(r)? as usize;
        let q_max = read_u64(r)? as usize;
        let dim = read_u64(r)? as usize;
        let count = read_u64(r)? as usize;
        if count > q_max {
            return Err(MelodiError::Checkpoint(format!(
                "snapshot holds {count} blocks but q_max is {q_max}"
            )));
        }
        let mut mem = LongTermMemory::new(l, q_max, dim);
        for _ in 0..count {
            let mut hdr = [0u8; 8];
            r.read_exact(&mut hdr)?;
            let window_index = u64::from_le_bytes(hdr) as usize;
            let read_mat = |r: &mut R| -> Result<Tensor> {
                let mut data = vec![0.0f64; l * dim];
                let mut buf = [0u8; 4];
                for v in data.iter_mut() {
                    r.read_exact(&mut buf)?;
                    *v = f32::from_le_bytes(buf) as f64;
                }
                Ok(Tensor::leaf(vec![l, dim], data))
            };
            let keys = read_mat(r)?;
            let values = read_mat(r)?;
            mem.queue.push_back(KVBlock { keys, values, window_index });
            mem.appended = window_index + 1;
        }
        Ok(mem)
    }
}

/// Long-term layer parameters: a short-term layer plus the long-token mixer
/// (absent in the copy-short-as-long ablation) and the per-head gates, which
/// live on the block's attention params.
pub struct LongTermLayerParams {
    pub short: ShortTermLayerParams,
    pub mix_long: Option<MixerMatrix>,
}

/// Compression of the block output into L long-term tokens.
pub fn compress_to_long_tokens(
    x_out: &Tensor,
    u_hat: &Tensor,
    mix_long: &MixerMatrix,
) -> Result<Tensor> {
    token_mix(x_out, u_hat, mix_long)
}

/// One long-term step. Self path identical to the short-term block; the
/// cross path attends to the gathered memory (no mask, no position bias) and
/// is merged per head when the memory is non-empty. The compressed block for
/// this window is projected with the layer's own K/V weights and appended.
#[allow(clippy::too_many_arguments)]
pub fn long_term_step(
    memory: &mut LongTermMemory,
    z_prev: &Tensor,
    z_empty: bool,
    x_in: &Tensor,
    u_in: &Tensor,
    params: &LongTermLayerParams,
    detach_kv: bool,
    copy_short_as_long: bool,
    ctx: &FwdCtx,
) -> Result<(Tensor, Tensor, Tensor)> {
    let gathered = (!memory.is_empty()).then(|| memory.gather_kv());
    let out = block_forward(
        &params.short.block,
        x_in,
        Some(u_in),
        Prefix::Tokens { z: z_prev, empty: z_empty },
        gathered.as_ref().map(|(k, v)| (k, v)),
        ctx,
    )?;
    let x_out = out.x_out;
    let u_hat = out.u_hat.expect("summary tokens present");

    let (z_next, u_out) = match (&params.short.mix_up, &params.short.mix_right) {
        (Some(up), Some(right)) => (
            token_mix(&x_out, &u_hat, right)?,
            token_mix(&x_out, &u_hat, up)?,
        ),
        _ => (u_hat.clone(), u_hat.clone()),
    };

    let long_tokens = if copy_short_as_long {
        z_next.clone()
    } else {
        let mix = params
            .mix_long
            .as_ref()
            .expect("mix_long required unless copy_short_as_long");
        compress_to_long_tokens(&x_out, &u_hat, mix)?
    };
    let (keys, values) = params.short.block.kv_project(&long_tokens)?;
    let (keys, values) = if detach_kv {
        (keys.detach(), values.detach())
    } else {
        (keys, values)
    };
    memory.append(KVBlock {
        keys,
        values,
        window_index: memory.next_window_index(),
    })?;
    Ok((z_next, x_out, u_out))
}
