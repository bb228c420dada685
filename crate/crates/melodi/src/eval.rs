//! Perplexity evaluation, exact memory-footprint accounting, and a
//! synthetic long-range recall probe.

use crate::config::{MemoryPolicy, ModelConfig, TrainConfig};
use crate::data::{make_batches, Segment};
use crate::error::{MelodiError, Result};
use crate::model::Model;
use crate::short_term::FwdCtx;
use crate::train::{shift_targets, train_step, Optimizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Exact integer float counts of the persistent memory stores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub short_floats: usize,
    pub long_floats: usize,
    pub policy: MemoryPolicy,
    pub layers: usize,
    pub short_layers: usize,
    pub long_layers: usize,
    pub s: usize,
    pub l: usize,
    pub w: usize,
    pub q_max: usize,
    pub dim: usize,
}

impl MemoryReport {
    pub fn total_floats(&self) -> usize {
        self.short_floats + self.long_floats
    }

    /// CSV with the reference table's column names (All, Short, Long).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,layers,dim,W,S,L,Q_max,All,Short,Long\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            self.policy,
            self.layers,
            self.dim,
            self.w,
            self.s,
            self.l,
            self.q_max,
            self.total_floats(),
            self.short_floats,
            self.long_floats,
        );
        out
    }
}

/// Pure integer accounting. Short-term stores tokens (S·dim per layer that
/// holds a recurrent z — disabled layers hold none, long layers hold one);
/// long-term stores KV pairs (L·2·dim·Q_max per long layer). The XL cache
/// and Memorizing-Transformer memory store uncompressed KV pairs.
pub fn memory_footprint(cfg: &ModelConfig) -> MemoryReport {
    let (short_layers, long_layers) = match cfg.memory_policy {
        MemoryPolicy::Melodi => {
            let with_z = (0..cfg.n_layers)
                .filter(|i| {
                    cfg.short_term_enabled_layers.contains(i)
                        || cfg.long_term_layer_positions.contains(i)
                })
                .count();
            (with_z, cfg.long_term_layer_positions.len())
        }
        MemoryPolicy::Xl => (cfg.n_layers, 0),
        MemoryPolicy::Memorizing => (cfg.n_layers, 1),
        MemoryPolicy::None => (0, 0),
    };
    let l = if cfg.copy_short_as_long { cfg.short_tokens } else { cfg.long_tokens };
    let (short_floats, long_floats) = match cfg.memory_policy {
        MemoryPolicy::Melodi => (
            cfg.short_tokens * cfg.dim * short_layers,
            l * 2 * cfg.dim * cfg.q_max * long_layers,
        ),
        MemoryPolicy::Xl => (cfg.window_len * 2 * cfg.dim * cfg.n_layers, 0),
        MemoryPolicy::Memorizing => (
            cfg.window_len * 2 * cfg.dim * cfg.n_layers,
            cfg.window_len * 2 * cfg.dim * cfg.q_max,
        ),
        MemoryPolicy::None => (0, 0),
    };
    MemoryReport {
        short_floats,
        long_floats,
        policy: cfg.memory_policy,
        layers: cfg.n_layers,
        short_layers,
        long_layers,
        s: cfg.short_tokens,
        l,
        w: cfg.window_len,
        q_max: cfg.q_max,
        dim: cfg.dim,
    }
}

/// exp(mean NLL) over all unmasked eval tokens, dropout off. With
/// `carry_state` the memory threads across consecutive segments of one
/// document; otherwise it resets per segment.
pub fn perplexity(model: &Model, segments: &[Segment], carry_state: bool) -> Result<f64> {
    if segments.is_empty() {
        return Err(MelodiError::Corpus("empty eval corpus".into()));
    }
    let w = model.cfg.window_len;
    let ctx = FwdCtx::eval();
    let mut nll_sum = 0.0;
    let mut count = 0usize;
    let mut state = model.init_state();
    let mut prev_doc = usize::MAX;
    for seg in segments {
        if !carry_state || seg.doc_id != prev_doc {
            state = model.init_state();
        }
        prev_doc = seg.doc_id;
        let (targets, tmask) = shift_targets(&seg.tokens, &seg.mask);
        for (wi, window) in seg.tokens.chunks(w).enumerate() {
            let logits = model.forward_window(&mut state, window, &ctx)?;
            let lv = logits.to_vec();
            let v = model.cfg.vocab_size;
            for pos in 0..w {
                let gi = wi * w + pos;
                if !tmask[gi] {
                    continue;
                }
                let row = &lv[pos * v..(pos + 1) * v];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
                nll_sum += lse - row[targets[gi]];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(MelodiError::Corpus("eval corpus has no unmasked targets".into()));
    }
    Ok((nll_sum / count as f64).exp())
}

/// One synthetic recall document: a key→value fact planted in window 0 and
/// queried `d` windows later; filler in between. The query position predicts
/// the planted value.
pub struct ProbeDoc {
    pub tokens: Vec<usize>,
    pub query_pos: usize,
    pub value: usize,
}

const PROBE_KEYS: std::ops::Range<usize> = 10..26;
const PROBE_VALUES: std::ops::Range<usize> = 30..46;
const PROBE_FILLER: std::ops::Range<usize> = 50..90;

/// Total windows per probe document (fact window + max distance).
pub fn probe_windows(max_distance: usize) -> usize {
    max_distance + 1
}

pub fn gen_probe_doc(rng: &mut ChaCha8Rng, w: usize, d: usize, max_d: usize) -> ProbeDoc {
    assert!(w >= 4 && d >= 1 && d <= max_d);
    let n_windows = probe_windows(max_d);
    // one distinct key per window: window 0 holds the queried binding, later
    // windows hold distractor bindings that compete for short-term capacity
    let mut keys: Vec<usize> = PROBE_KEYS.collect();
    assert!(keys.len() >= n_windows);
    for i in 0..n_windows {
        let j = rng.gen_range(i..keys.len());
        keys.swap(i, j);
    }
    let value = rng.gen_range(PROBE_VALUES);
    let total = n_windows * w;
    let mut tokens: Vec<usize> = (0..total).map(|_| rng.gen_range(PROBE_FILLER)).collect();
    for win in 0..n_windows {
        let (k, v) = if win == 0 {
            (keys[0], value)
        } else {
            (keys[win], rng.gen_range(PROBE_VALUES))
        };
        for i in 0..w {
            tokens[win * w + i] = if i % 2 == 0 { k } else { v };
        }
    }
    // query at the tail of window d: ... key value — the position holding
    // window 0's key must predict window 0's value
    let query_pos = d * w + (w - 2);
    tokens[query_pos] = keys[0];
    tokens[query_pos + 1] = value;
    ProbeDoc { tokens, query_pos, value }
}

/// Argmax accuracy at the query position over freshly generated docs.
pub fn probe_accuracy(
    model: &Model,
    w: usize,
    d: usize,
    max_d: usize,
    n_docs: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_docs {
        let doc = gen_probe_doc(&mut rng, w, d, max_d);
        let mut state = model.init_state();
        let mut predicted = usize::MAX;
        for (wi, window) in doc.tokens.chunks(w).enumerate() {
            let logits = model.forward_window(&mut state, window, &FwdCtx::eval())?;
            if wi == d {
                let v = model.cfg.vocab_size;
                let pos = doc.query_pos - d * w;
                let row = &logits.to_vec()[pos * v..(pos + 1) * v];
                predicted = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                break;
            }
        }
        if predicted == doc.value {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_docs as f64)
}

pub struct ProbeResult {
    pub distance: usize,
    pub accuracy: f64,
}

/// Trains a fresh tiny model on the planted-fact task (distances mixed
/// uniformly) and reports query accuracy per distance.
pub fn recall_probe(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    distances: &[usize],
    n_train_docs: usize,
    n_eval_docs: usize,
) -> Result<Vec<ProbeResult>> {
    assert!(!distances.is_empty());
    let max_d = *distances.iter().max().unwrap();
    let w = model_cfg.window_len;
    let seg_len = probe_windows(max_d) * w;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x70726f6265);
    let segments: Vec<Segment> = (0..n_train_docs)
        .map(|i| {
            let d = distances[rng.gen_range(0..distances.len())];
            let doc = gen_probe_doc(&mut rng, w, d, max_d);
            Segment { tokens: doc.tokens, mask: vec![true; seg_len], doc_id: i }
        })
        .collect();

    let model = Model::build(model_cfg, train_cfg.seed)?;
    let mut opt = Optimizer::new(train_cfg.optimizer, &model.params());
    let batches_per_epoch = (segments.len() / train_cfg.batch_size).max(1);
    let mut epoch_batches = Vec::new();
    let mut cached_epoch = u64::MAX;
    for step in 0..train_cfg.steps {
        let epoch = (step / batches_per_epoch) as u64;
        if epoch != cached_epoch {
            epoch_batches =
                make_batches(&segments, train_cfg.batch_size, w, train_cfg.seed, epoch, true);
            cached_epoch = epoch;
        }
        train_step(&model, &epoch_batches[step % batches_per_epoch], &mut opt, step, train_cfg)?;
    }

    distances
        .iter()
        .map(|&d| {
            probe_accuracy(&model, w, d, max_d, n_eval_docs, train_cfg.seed ^ d as u64 ^ 0xeeee)
                .map(|accuracy| ProbeResult { distance: d, accuracy })
        })
        .collect()
}
