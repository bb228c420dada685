//! Flat key=value configuration: model architecture, memory policy, and
//! training hyperparameters in one diff-able text file.

use crate::error::{MelodiError, Result};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryPolicy {
    Melodi,
    Xl,
    Memorizing,
    None,
}

impl fmt::Display for MemoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryPolicy::Melodi => "melodi",
            MemoryPolicy::Xl => "xl",
            MemoryPolicy::Memorizing => "memorizing",
            MemoryPolicy::None => "none",
        })
    }
}

impl FromStr for MemoryPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "melodi" => Ok(MemoryPolicy::Melodi),
            "xl" => Ok(MemoryPolicy::Xl),
            "memorizing" => Ok(MemoryPolicy::Memorizing),
            "none" => Ok(MemoryPolicy::None),
            other => Err(format!("unknown memory_policy `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Full architecture + memory-policy + ablation configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub long_term_layer_positions: Vec<usize>,
    pub short_term_enabled_layers: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub window_len: usize,
    pub short_tokens: usize,
    pub long_tokens: usize,
    pub q_max: usize,
    pub vocab_size: usize,
    pub memory_policy: MemoryPolicy,
    pub branching: bool,
    pub copy_short_as_long: bool,
    pub detach_long_kv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // 13-layer default with the long-term layer at layer 8.
        ModelConfig {
            n_layers: 13,
            long_term_layer_positions: vec![8],
            short_term_enabled_layers: (0..13).collect(),
            dim: 1024,
            heads: 8,
            ffn_hidden: 4096,
            window_len: 512,
            short_tokens: 128,
            long_tokens: 64,
            q_max: 128,
            vocab_size: 2048,
            memory_policy: MemoryPolicy::Melodi,
            branching: true,
            copy_short_as_long: false,
            detach_long_kv: true,
        }
    }
}

impl ModelConfig {
    pub fn summary_tokens(&self) -> usize {
        // U = S whenever summary tokens are in play.
        self.short_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(MelodiError::InvalidConfig {
                field: field.to_string(),
                message,
            })
        };
        if self.n_layers == 0 {
            return fail("n_layers", "must be positive".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail("heads", format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if self.window_len == 0 {
            return fail("window_len", "must be positive".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size", "must be positive".into());
        }
        for &p in &self.long_term_layer_positions {
            if p >= self.n_layers {
                return fail(
                    "long_term_layer_positions",
                    format!("position {p} out of range [0, {})", self.n_layers),
                );
            }
        }
        for &p in &self.short_term_enabled_layers {
            if p >= self.n_layers {
                return fail(
                    "short_term_enabled_layers",
                    format!("layer {p} out of range [0, {})", self.n_layers),
                );
            }
        }
        if self.memory_policy == MemoryPolicy::Melodi {
            if self.copy_short_as_long {
                if self.long_tokens != self.short_tokens {
                    return fail(
                        "copy_short_as_long",
                        format!(
                            "requires L == S, got L={} S={}",
                            self.long_tokens, self.short_tokens
                        ),
                    );
                }
            } else if !self.long_term_layer_positions.is_empty()
                && self.long_tokens >= self.short_tokens
            {
                return fail(
                    "long_tokens",
                    format!(
                        "L < S required (L={}, S={})",
                        self.long_tokens, self.short_tokens
                    ),
                );
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "n_layers={}\nlong_term_layer_positions={}\nshort_term_enabled_layers={}\ndim={}\nheads={}\nffn_hidden={}\nwindow_len={}\nshort_tokens={}\nlong_tokens={}\nq_max={}\nvocab_size={}\nmemory_policy={}\nbranching={}\ncopy_short_as_long={}\ndetach_long_kv={}\n",
            self.n_layers,
            list(&self.long_term_layer_positions),
            list(&self.short_term_enabled_layers),
            self.dim,
            self.heads,
            self.ffn_hidden,
            self.window_len,
            self.short_tokens,
            self.long_tokens,
            self.q_max,
            self.vocab_size,
            self.memory_policy,
            self.branching,
            self.copy_short_as_long,
            self.detach_long_kv,
        )
    }

    /// FNV-1a over the canonical serialization; stamped into checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a(self.serialize().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Training hyperparameters (defaults follow the reference schedule).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub windows_per_segment: usize,
    pub min_doc_tokens: usize,
    pub corpus: String,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            warmup_steps: 1000,
            max_lr: 0.01,
            min_lr: 0.001,
            dropout: 0.05,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            eval_every: 0,
            checkpoint_every: 0,
            log_every: 1,
            windows_per_segment: 8,
            min_doc_tokens: 0,
            corpus: String::new(),
            out_dir: "out".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(MelodiError::InvalidConfig {
                field: field.to_string(),
                message,
            })
        };
        if self.min_lr > self.max_lr {
            return fail("min_lr", format!("min_lr {} > max_lr {}", self.min_lr, self.max_lr));
        }
        if self.warmup_steps > self.steps {
            return fail(
                "warmup_steps",
                format!("warmup_steps {} > steps {}", self.warmup_steps, self.steps),
            );
        }
        if self.grad_clip <= 0.0 {
            return fail("grad_clip", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("rate {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if self.windows_per_segment == 0 {
            return fail("windows_per_segment", "must be positive".into());
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        format!(
            "steps={}\nwarmup_steps={}\nmax_lr={}\nmin_lr={}\ndropout={}\nbatch_size={}\nseed={}\noptimizer={}\ngrad_clip={}\neval_every={}\ncheckpoint_every={}\nlog_every={}\nwindows_per_segment={}\nmin_doc_tokens={}\ncorpus={}\nout_dir={}\n",
            self.steps,
            self.warmup_steps,
            self.max_lr,
            self.min_lr,
            self.dropout,
            self.batch_size,
            self.seed,
            self.optimizer,
            self.grad_clip,
            self.eval_every,
            self.checkpoint_every,
            self.log_every,
            self.windows_per_segment,
            self.min_doc_tokens,
            self.corpus,
            self.out_dir,
        )
    }
}

/// Both configs parsed from one flat key=value file. Unknown keys are
/// rejected with the offending field name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MelodiError::InvalidConfig {
                    field: format!("line {}", lineno + 1),
                    message: format!("expected key=value, got `{line}`"),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |message: String| MelodiError::InvalidConfig {
            field: key.to_string(),
            message,
        };
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
        let parse_bool = |v: &str| v.parse::<bool>().map_err(|e| bad(e.to_string()));
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.trim().parse::<usize>().map_err(|e| bad(e.to_string())))
                .collect()
        };
        match key {
            "n_layers" => self.model.n_layers = parse_usize(value)?,
            "long_term_layer_positions" => {
                self.model.long_term_layer_positions = parse_list(value)?
            }
            "short_term_enabled_layers" => self.model.short_term_enabled_layers = parse_list(value)?,
            "dim" => self.model.dim = parse_usize(value)?,
            "heads" => self.model.heads = parse_usize(value)?,
            "ffn_hidden" => self.model.ffn_hidden = parse_usize(value)?,
            "window_len" => self.model.window_len = parse_usize(value)?,
            "short_tokens" => self.model.short_tokens = parse_usize(value)?,
            "long_tokens" => self.model.long_tokens = parse_usize(value)?,
            "q_max" => self.model.q_max = parse_usize(value)?,
            "vocab_size" => self.model.vocab_size = parse_usize(value)?,
            "memory_policy" => {
                self.model.memory_policy = value.parse().map_err(bad)?
            }
            "branching" => self.model.branching = parse_bool(value)?,
            "copy_short_as_long" => self.model.copy_short_as_long = parse_bool(value)?,
            "detach_long_kv" => self.model.detach_long_kv = parse_bool(value)?,
            "steps" => self.train.steps = parse_usize(value)?,
            "warmup_steps" => self.train.warmup_steps = parse_usize(value)?,
            "max_lr" => self.train.max_lr = parse_f64(value)?,
            "min_lr" => self.train.min_lr = parse_f64(value)?,
            "dropout" => self.train.dropout = parse_f64(value)?,
            "batch_size" => self.train.batch_size = parse_usize(value)?,
            "seed" => self.train.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "optimizer" => {
                self.train.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(bad(format!("unknown optimizer `{other}`"))),
                }
            }
            "grad_clip" => self.train.grad_clip = parse_f64(value)?,
            "eval_every" => self.train.eval_every = parse_usize(value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_usize(value)?,
            "log_every" => self.train.log_every = parse_usize(value)?,
            "windows_per_segment" => self.train.windows_per_segment = parse_usize(value)?,
            "min_doc_tokens" => self.train.min_doc_tokens = parse_usize(value)?,
            "corpus" => self.train.corpus = value.to_string(),
            "out_dir" => self.train.out_dir = value.to_string(),
            other => {
                return Err(MelodiError::InvalidConfig {
                    field: other.to_string(),
                    message: "unknown key".to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        format!("{}{}", self.model.serialize(), self.train.serialize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn l_not_less_than_s_names_the_invariant() {
        let mut cfg = RunConfig::default();
        cfg.model.long_tokens = cfg.model.short_tokens;
        let err = cfg.model.validate().unwrap_err().to_string();
        assert!(err.contains("L < S"), "message was: {err}");
    }

    #[test]
    fn long_position_out_of_range_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.long_term_layer_positions = vec![13];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn copy_short_as_long_forces_equal_counts() {
        let mut cfg = ModelConfig::default();
        cfg.copy_short_as_long = true;
        assert!(cfg.validate().is_err());
        cfg.long_tokens = cfg.short_tokens;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::parse("frobnicate=1\n").is_err());
    }

    #[test]
    fn grad_clip_zero_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.grad_clip = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.dim = 512;
        assert_ne!(a.hash(), b.hash());
    }
}
