//! Training loop: warmup + cosine learning-rate schedule, windowed BPTT over
//! segments, global-norm gradient clipping, Adam/SGD, metrics CSV, and
//! resumable checkpoints.

use crate::checkpoint::{self, Checkpoint, Record};
use crate::config::{OptimizerKind, RunConfig, TrainConfig};
use crate::data::{self, Segment, Vocab, WindowBatch};
use crate::error::{MelodiError, Result};
use crate::model::Model;
use crate::short_term::FwdCtx;
use crate::tensor::{Parameter, Tensor};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Linear warmup to `max_lr`, then cosine decay to `min_lr`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.max_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if cfg.steps == cfg.warmup_steps {
        return cfg.max_lr;
    }
    let t = (step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64;
    cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Next-token targets for one segment row: position i predicts token i+1,
/// so the last token of each window predicts the first of the next. The
/// final position of the segment has no target and is masked, as is any
/// position whose input or target is padding.
pub fn shift_targets(tokens: &[usize], mask: &[bool]) -> (Vec<usize>, Vec<bool>) {
    let n = tokens.len();
    let mut targets = vec![data::PAD; n];
    let mut tmask = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        targets[i] = tokens[i + 1];
        tmask[i] = mask[i] && mask[i + 1];
    }
    (targets, tmask)
}

/// Per-window loss term: (mean NLL over unmasked positions, count), or None
/// when the window is fully masked.
pub fn window_loss_term(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<Option<(Tensor, usize)>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    Ok(Some((logits.cross_entropy(targets, mask)?, count)))
}

/// Mean token-level cross-entropy over all unmasked positions of the batch.
/// State resets at the start of every row (segments are independent during
/// training). Returns the loss tensor and the unmasked-token count.
pub fn batch_loss(model: &Model, batch: &WindowBatch, ctx: &FwdCtx) -> Result<(Tensor, usize)> {
    let w = batch.window_len;
    let mut terms: Vec<(Tensor, usize)> = Vec::new();
    for row in 0..batch.token_ids.len() {
        let mut state = model.init_state();
        let (targets, tmask) = shift_targets(&batch.token_ids[row], &batch.loss_mask[row]);
        for (wi, window) in batch.token_ids[row].chunks(w).enumerate() {
            let logits = model.forward_window(&mut state, window, ctx)?;
            if let Some(term) =
                window_loss_term(&logits, &targets[wi * w..(wi + 1) * w], &tmask[wi * w..(wi + 1) * w])?
            {
                terms.push(term);
            }
        }
    }
    let total: usize = terms.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(MelodiError::Corpus("batch has no unmasked targets".into()));
    }
    let mut loss = Tensor::scalar(0.0);
    for (t, c) in terms {
        loss = loss.add(&t.scale(c as f64 / total as f64));
    }
    Ok((loss, total))
}

/// Adam (decoupled weight decay) or plain SGD over a fixed parameter list.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Parameter]) -> Optimizer {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Global-norm clip then one update. Parameters with no gradient (or
    /// marked non-trainable) are left untouched.
    pub fn step(&mut self, params: &[Parameter], lr: f64, grad_clip: f64) {
        let grads: Vec<Option<Vec<f64>>> = params
            .iter()
            .map(|p| if p.trainable { p.tensor.grad() } else { None })
            .collect();
        let sq: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        let clip = if norm > grad_clip { grad_clip / norm } else { 1.0 };
        self.t += 1;
        for (i, (p, grad)) in params.iter().zip(&grads).enumerate() {
            let Some(grad) = grad else { continue };
            let mut data = p.tensor.to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (d, g) in data.iter_mut().zip(grad) {
                        *d -= lr * (g * clip + self.weight_decay * *d);
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                    for (j, (d, g)) in data.iter_mut().zip(grad).enumerate() {
                        let g = g * clip;
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *d -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *d);
                    }
                }
            }
            p.tensor.set_data(&data);
        }
    }
}

/// One optimization step; aborts on a non-finite loss.
pub fn train_step(
    model: &Model,
    batch: &WindowBatch,
    opt: &mut Optimizer,
    step: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let ctx = FwdCtx::train(cfg.dropout, cfg.seed, step as u64);
    let (loss, _) = batch_loss(model, batch, &ctx)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(MelodiError::NonFiniteLoss { step, value });
    }
    model.zero_grads();
    loss.backward()?;
    opt.step(&model.params(), lr_schedule(step, cfg), cfg.grad_clip);
    model.zero_grads();
    Ok(value)
}

pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

fn training_records(model: &Model, opt: &Optimizer) -> Vec<Record> {
    let mut records: Vec<Record> = model
        .params()
        .iter()
        .map(|p| Record::f64(p.name.clone(), p.tensor.shape().to_vec(), p.tensor.to_vec()))
        .collect();
    for (i, p) in model.params().iter().enumerate() {
        records.push(Record::f64(format!("opt.m.{}", p.name), p.tensor.shape().to_vec(), opt.m[i].clone()));
        records.push(Record::f64(format!("opt.v.{}", p.name), p.tensor.shape().to_vec(), opt.v[i].clone()));
    }
    records.push(Record::f64("opt.t", vec![1], vec![opt.t as f64]));
    records
}

/// Restores model weights (and optimizer state if present) from a
/// checkpoint. Returns the step to resume from.
pub fn restore(model: &Model, opt: Option<&mut Optimizer>, ckpt: &Checkpoint) -> Result<u64> {
    let missing = |name: &str| MelodiError::Checkpoint(format!("missing record `{name}`"));
    for p in model.params() {
        let r = ckpt.record(&p.name).ok_or_else(|| missing(&p.name))?;
        if r.shape != p.tensor.shape() {
            return Err(MelodiError::Checkpoint(format!(
                "record `{}`: checkpoint shape {:?} != model shape {:?}",
                p.name,
                r.shape,
                p.tensor.shape()
            )));
        }
        p.tensor.set_data(&r.data);
    }
    if let Some(opt) = opt {
        for (i, p) in model.params().iter().enumerate() {
            let m = format!("opt.m.{}", p.name);
            let v = format!("opt.v.{}", p.name);
            opt.m[i] = ckpt.record(&m).ok_or_else(|| missing(&m))?.data.clone();
            opt.v[i] = ckpt.record(&v).ok_or_else(|| missing(&v))?.data.clone();
        }
        opt.t = ckpt.record("opt.t").ok_or_else(|| missing("opt.t"))?.data[0] as u64;
    }
    Ok(ckpt.step)
}

/// Loads (or builds and saves) the vocabulary for a run directory.
pub fn run_vocab(run: &RunConfig, out_dir: &Path, docs: &[Vec<u8>]) -> Result<Vocab> {
    let vocab_path = out_dir.join("vocab.txt");
    if vocab_path.exists() {
        Vocab::parse(&fs::read_to_string(&vocab_path)?)
    } else {
        let vocab = data::build_vocab(docs, run.model.vocab_size)?;
        fs::write(&vocab_path, vocab.serialize())?;
        Ok(vocab)
    }
}

/// Full training run. `resume` points at a checkpoint written by a previous
/// run with the identical config; the loss stream after resuming is
/// bit-identical to an uninterrupted run.
pub fn train(run: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    run.model.validate()?;
    run.train.validate()?;
    let out_dir = PathBuf::from(&run.train.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.txt"), run.serialize())?;

    let docs = data::load_corpus(Path::new(&run.train.corpus))?;
    let vocab = run_vocab(run, &out_dir, &docs)?;
    if vocab.size() > run.model.vocab_size {
        return Err(MelodiError::InvalidConfig {
            field: "vocab_size".into(),
            message: format!("vocab file has {} entries > model vocab {}", vocab.size(), run.model.vocab_size),
        });
    }
    let segment_len = run.train.windows_per_segment * run.model.window_len;
    let segments = data::prepare_segments(&docs, &vocab, segment_len, run.train.min_doc_tokens);
    if segments.len() < run.train.batch_size {
        return Err(MelodiError::Corpus(format!(
            "corpus yields {} segments < batch_size {}",
            segments.len(),
            run.train.batch_size
        )));
    }

    let model = Model::build(&run.model, run.train.seed)?;
    let mut opt = Optimizer::new(run.train.optimizer, &model.params());
    let mut start_step = 0usize;
    if let Some(path) = resume {
        let ckpt = checkpoint::load(path)?;
        if ckpt.config_text != run.serialize() {
            return Err(MelodiError::Checkpoint(
                "checkpoint config does not match this run's config".into(),
            ));
        }
        start_step = restore(&model, Some(&mut opt), &ckpt)? as usize;
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if start_step == 0 {
        writeln!(metrics, "step,loss,ppl,lr,tokens_per_sec")?;
    }

    let batches_per_epoch = segments.len() / run.train.batch_size;
    let mut epoch_batches: Vec<WindowBatch> = Vec::new();
    let mut cached_epoch = u64::MAX;
    let mut losses = Vec::with_capacity(run.train.steps - start_step);
    let tokens_per_step = run.train.batch_size * segment_len;

    for step in start_step..run.train.steps {
        let epoch = (step / batches_per_epoch) as u64;
        if epoch != cached_epoch {
            epoch_batches = data::make_batches(
                &segments,
                run.train.batch_size,
                run.model.window_len,
                run.train.seed,
                epoch,
                true,
            );
            cached_epoch = epoch;
        }
        let batch = &epoch_batches[step % batches_per_epoch];
        let started = Instant::now();
        let loss = train_step(&model, batch, &mut opt, step, &run.train)?;
        losses.push(loss);
        if run.train.log_every > 0 && (step + 1) % run.train.log_every == 0 {
            let tps = tokens_per_step as f64 / started.elapsed().as_secs_f64().max(1e-9);
            writeln!(
                metrics,
                "{},{:.6},{:.6},{:.8},{:.1}",
                step + 1,
                loss,
                loss.exp(),
                lr_schedule(step, &run.train),
                tps
            )?;
        }
        if run.train.checkpoint_every > 0 && (step + 1) % run.train.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_{:06}.bin", step + 1));
            checkpoint::save(
                &path,
                &Checkpoint {
                    config_text: run.serialize(),
                    step: (step + 1) as u64,
                    records: training_records(&model, &opt),
                },
            )?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint_final.bin");
    checkpoint::save(
        &final_checkpoint,
        &Checkpoint {
            config_text: run.serialize(),
            step: run.train.steps as u64,
            records: training_records(&model, &opt),
        },
    )?;
    Ok(TrainOutcome { losses, final_checkpoint, metrics_path })
}

/// Convenience for eval and tests: all segments of a corpus path.
pub fn corpus_segments(run: &RunConfig, corpus: &Path, vocab: &Vocab) -> Result<Vec<Segment>> {
    let docs = data::load_corpus(corpus)?;
    let segment_len = run.train.windows_per_segment * run.model.window_len;
    Ok(data::prepare_segments(&docs, vocab, segment_len, run.train.min_doc_tokens))
}
