//! Command-line front end: `train`, `eval`, `memsize`, `ablate`, `probe`.
//! Every subcommand writes its outputs (CSV) into a run directory; invalid
//! configs exit with status 2 and a message naming the offending field.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data;
use crate::error::Result;
use crate::eval::{memory_footprint, perplexity, recall_probe};
use crate::model::Model;
use crate::train::{self, restore, run_vocab};
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "melodi", about = "Hierarchical-memory language model trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat key=value config file.
    Train {
        config: PathBuf,
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate perplexity of a checkpoint on a corpus.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        /// Carry memory state across consecutive segments of a document.
        #[arg(long)]
        carry_state: bool,
        /// Vocab file; defaults to vocab.txt next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Exact memory-footprint accounting for a config.
    Memsize { config: PathBuf },
    /// Cartesian sweep over `sweep.<key>=v1|v2|...` lines in the config.
    Ablate { config: PathBuf },
    /// Synthetic long-range recall probe (`probe.distances=1,4,16` etc.).
    Probe { config: PathBuf },
}

/// Entry point; returns the process exit code (2 on validation/usage
/// failures, 1 on runtime errors).
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let outcome = match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval { checkpoint, corpus, carry_state, vocab } => {
            cmd_eval(&checkpoint, &corpus, carry_state, vocab.as_deref())
        }
        Command::Memsize { config } => cmd_memsize(&config),
        Command::Ablate { config } => cmd_ablate(&config),
        Command::Probe { config } => cmd_probe(&config),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                crate::MelodiError::InvalidConfig { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let run = RunConfig::parse(&fs::read_to_string(config)?)?;
    let out = train::train(&run, resume)?;
    println!(
        "trained {} steps; final loss {:.4}; checkpoint {}",
        run.train.steps,
        out.losses.last().copied().unwrap_or(f64::NAN),
        out.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, corpus: &Path, carry_state: bool, vocab: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let run = RunConfig::parse(&ckpt.config_text)?;
    let model = Model::build(&run.model, run.train.seed)?;
    restore(&model, None, &ckpt)?;
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => ckpt_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt"),
    };
    let vocab = data::Vocab::parse(&fs::read_to_string(&vocab_path)?)?;
    let segments = train::corpus_segments(&run, corpus, &vocab)?;
    let ppl = perplexity(&model, &segments, carry_state)?;
    let out_dir = ckpt_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let row = format!(
        "checkpoint,corpus,carry_state,segments,ppl\n{},{},{},{},{:.6}\n",
        ckpt_path.display(),
        corpus.display(),
        carry_state,
        segments.len(),
        ppl
    );
    fs::write(out_dir.join("eval.csv"), &row)?;
    println!("ppl {ppl:.6}");
    Ok(())
}

fn cmd_memsize(config: &Path) -> Result<()> {
    let run = RunConfig::parse(&fs::read_to_string(config)?)?;
    let csv = memory_footprint(&run.model).to_csv();
    let out_dir = PathBuf::from(&run.train.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("memsize.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Splits a config file into plain lines and `sweep.<key>=a|b|...` axes.
fn parse_sweep(text: &str) -> (String, Vec<(String, Vec<String>)>) {
    let mut base = String::new();
    let mut axes = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("sweep.") {
            if let Some((key, values)) = rest.split_once('=') {
                axes.push((
                    key.trim().to_string(),
                    values.split('|').map(|v| v.trim().to_string()).collect(),
                ));
                continue;
            }
        }
        base.push_str(line);
        base.push('\n');
    }
    (base, axes)
}

fn cmd_ablate(config: &Path) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let (base_text, axes) = parse_sweep(&text);
    let base = RunConfig::parse(&base_text)?;
    if axes.is_empty() {
        return Err(crate::MelodiError::InvalidConfig {
            field: "sweep".into(),
            message: "ablate config declares no sweep.<key> axes".into(),
        });
    }
    // cartesian product over the axes
    let mut arms: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &axes {
        arms = arms
            .into_iter()
            .flat_map(|arm| {
                values.iter().map(move |v| {
                    let mut next = arm.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    let root = PathBuf::from(&base.train.out_dir);
    fs::create_dir_all(&root)?;
    let mut summary = String::from("arm,final_loss,train_ppl,out_dir\n");
    for arm in &arms {
        let mut run = base.clone();
        let tag: Vec<String> = arm.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let tag = tag.join("_");
        for (k, v) in arm {
            run.set(k, v)?;
        }
        run.train.out_dir = root.join(&tag).to_string_lossy().into_owned();
        run.model.validate()?;
        run.train.validate()?;
        let outcome = train::train(&run, None)?;
        // post-hoc train-set perplexity with the final weights
        let ckpt = checkpoint::load(&outcome.final_checkpoint)?;
        let model = Model::build(&run.model, run.train.seed)?;
        restore(&model, None, &ckpt)?;
        let docs = data::load_corpus(Path::new(&run.train.corpus))?;
        let vocab = run_vocab(&run, Path::new(&run.train.out_dir), &docs)?;
        let segments = train::corpus_segments(&run, Path::new(&run.train.corpus), &vocab)?;
        let ppl = perplexity(&model, &segments, false)?;
        let _ = writeln!(
            summary,
            "{tag},{:.6},{:.6},{}",
            outcome.losses.last().copied().unwrap_or(f64::NAN),
            ppl,
            run.train.out_dir
        );
        println!("arm {tag}: train ppl {ppl:.4}");
    }
    fs::write(root.join("sweep.csv"), &summary)?;
    Ok(())
}

/// Probe config: regular model/train keys plus `probe.distances`,
/// `probe.train_docs`, `probe.eval_docs`.
fn cmd_probe(config: &Path) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let mut distances: Vec<usize> = vec![1, 4, 16];
    let mut train_docs = 256usize;
    let mut eval_docs = 64usize;
    let mut base = String::new();
    let bad = |key: &str, m: String| crate::MelodiError::InvalidConfig {
        field: key.to_string(),
        message: m,
    };
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("probe.") {
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| bad("probe", format!("expected probe.key=value, got `{trimmed}`")))?;
            match key.trim() {
                "distances" => {
                    distances = value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|e: std::num::ParseIntError| bad("probe.distances", e.to_string())))
                        .collect::<Result<_>>()?
                }
                "train_docs" => train_docs = value.trim().parse().map_err(|e: std::num::ParseIntError| bad("probe.train_docs", e.to_string()))?,
                "eval_docs" => eval_docs = value.trim().parse().map_err(|e: std::num::ParseIntError| bad("probe.eval_docs", e.to_string()))?,
                other => return Err(bad(&format!("probe.{other}"), "unknown probe key".into())),
            }
            continue;
        }
        base.push_str(line);
        base.push('\n');
    }
    let run = RunConfig::parse(&base)?;
    let out_dir = PathBuf::from(&run.train.out_dir);
    fs::create_dir_all(&out_dir)?;
    let results = recall_probe(&run.model, &run.train, &distances, train_docs, eval_docs)?;
    let mut csv = String::from("distance,accuracy\n");
    for r in &results {
        let _ = writeln!(csv, "{},{:.4}", r.distance, r.accuracy);
        println!("d={}: accuracy {:.3}", r.distance, r.accuracy);
    }
    fs::write(out_dir.join("probe.csv"), &csv)?;
    Ok(())
}
