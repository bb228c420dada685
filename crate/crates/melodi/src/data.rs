//! Corpus ingestion and the byte-level BPE tokenizer, plus document
//! segmentation into fixed windows and deterministic batching.
//!
//! The vocabulary is byte-level: ids 0..3 are the specials (pad, bos, eos),
//! ids 3..259 are the raw bytes, and ids above that are greedy byte-pair
//! merges learned from the corpus.

use crate::error::{MelodiError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BYTE_BASE: usize = 3;
/// Specials + 256 raw bytes.
pub const BASE_SIZE: usize = 259;

/// How many corpus bytes the merge learner looks at. Encoding still covers
/// the whole corpus; this only bounds the pair-counting passes.
const MERGE_SAMPLE_BYTES: usize = 1 << 20;

pub struct Vocab {
    /// Byte expansion per id; empty for the specials.
    tokens: Vec<Vec<u8>>,
    /// Merge rank by token-id pair; merged id = BASE_SIZE + rank.
    ranks: HashMap<(usize, usize), usize>,
    /// Pair per merged id, in rank order.
    merges: Vec<(usize, usize)>,
}

impl Vocab {
    /// Pure byte vocabulary with no merges.
    pub fn byte_level() -> Vocab {
        let mut tokens = vec![Vec::new(), Vec::new(), Vec::new()];
        tokens.extend((0u16..256).map(|b| vec![b as u8]));
        Vocab { tokens, ranks: HashMap::new(), merges: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn token_bytes(&self, id: usize) -> &[u8] {
        &self.tokens[id]
    }

    fn push_merge(&mut self, a: usize, b: usize) {
        let rank = self.merges.len();
        let mut bytes = self.tokens[a].clone();
        bytes.extend_from_slice(&self.tokens[b]);
        self.tokens.push(bytes);
        self.ranks.insert((a, b), rank);
        self.merges.push((a, b));
    }

    /// Encodes a byte string; merges are applied lowest rank first, exactly
    /// as they were learned. No bos/eos framing is added here.
    pub fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        let n = bytes.len();
        if n == 0 {
            return Vec::new();
        }
        let mut ids: Vec<usize> = bytes.iter().map(|&b| BYTE_BASE + b as usize).collect();
        if self.ranks.is_empty() {
            return ids;
        }
        // doubly linked list over positions so merges are O(1), with a lazy
        // min-heap of candidate pairs keyed by merge rank
        let mut next: Vec<usize> = (1..=n).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut alive = vec![true; n];
        // heap entries: Reverse((rank, left position)); stale ones are
        // re-validated on pop
        let mut heap: BinaryHeap<std::cmp::Reverse<(usize, usize)>> = BinaryHeap::new();
        let push_pair = |heap: &mut BinaryHeap<_>, ids: &Vec<usize>, i: usize, j: usize| {
            if j < n {
                if let Some(&r) = self.ranks.get(&(ids[i], ids[j])) {
                    heap.push(std::cmp::Reverse((r, i)));
                }
            }
        };
        for i in 0..n - 1 {
            push_pair(&mut heap, &ids, i, i + 1);
        }
        while let Some(std::cmp::Reverse((rank, i))) = heap.pop() {
            if !alive[i] {
                continue;
            }
            let j = next[i];
            if j >= n || !alive[j] {
                continue;
            }
            // stale if either side changed since the entry was pushed
            if self.ranks.get(&(ids[i], ids[j])) != Some(&rank) {
                continue;
            }
            ids[i] = BASE_SIZE + rank;
            alive[j] = false;
            next[i] = next[j];
            if next[i] < n {
                prev[next[i]] = i;
            }
            if prev[i] < n {
                push_pair(&mut heap, &ids, prev[i], i);
            }
            push_pair(&mut heap, &ids, i, next[i]);
        }
        (0..n).filter(|&i| alive[i]).map(|i| ids[i]).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(&self.tokens[id]);
        }
        out
    }

    /// One token per line: escaped bytes, plus the parent-pair ids for
    /// merged tokens (tab separated) so the merge table round-trips.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (id, bytes) in self.tokens.iter().enumerate() {
            match id {
                PAD => out.push_str("<pad>"),
                BOS => out.push_str("<bos>"),
                EOS => out.push_str("<eos>"),
                _ => {
                    for &b in bytes {
                        if (0x21..=0x7e).contains(&b) && b != b'\\' {
                            out.push(b as char);
                        } else {
                            let _ = write!(out, "\\x{b:02x}");
                        }
                    }
                }
            }
            if id >= BASE_SIZE {
                let (a, b) = self.merges[id - BASE_SIZE];
                let _ = write!(out, "\t{a} {b}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Vocab> {
        let corrupt = |m: &str| MelodiError::Corpus(format!("vocab file: {m}"));
        let mut vocab = Vocab::byte_level();
        for (id, line) in text.lines().enumerate() {
            if id < BASE_SIZE {
                continue; // base rows are fixed; trust but don't re-parse
            }
            let (_, pair) = line
                .split_once('\t')
                .ok_or_else(|| corrupt("merged token missing parent pair"))?;
            let (a, b) = pair
                .split_once(' ')
                .ok_or_else(|| corrupt("malformed parent pair"))?;
            let a: usize = a.parse().map_err(|_| corrupt("parent id"))?;
            let b: usize = b.parse().map_err(|_| corrupt("parent id"))?;
            if a >= vocab.size() || b >= vocab.size() {
                return Err(corrupt("parent id out of range"));
            }
            vocab.push_merge(a, b);
        }
        if text.lines().count() < BASE_SIZE {
            return Err(corrupt("too few rows"));
        }
        Ok(vocab)
    }
}

/// Learns `size - 259` greedy byte-pair merges over the corpus. Ties in pair
/// frequency break toward the smaller (left, right) id pair so the result is
/// deterministic.
pub fn build_vocab(docs: &[Vec<u8>], size: usize) -> Result<Vocab> {
    if size < BASE_SIZE {
        return Err(MelodiError::InvalidConfig {
            field: "vocab_size".into(),
            message: format!("must be at least {BASE_SIZE} (bytes + specials), got {size}"),
        });
    }
    let mut vocab = Vocab::byte_level();
    // working sequences for the counting passes, capped by sample budget
    let mut seqs: Vec<Vec<usize>> = Vec::new();
    let mut budget = MERGE_SAMPLE_BYTES;
    for d in docs {
        if budget == 0 {
            break;
        }
        let take = d.len().min(budget);
        budget -= take;
        seqs.push(d[..take].iter().map(|&b| BYTE_BASE + b as usize).collect());
    }
    while vocab.size() < size {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some(((a, b), _)) = best else { break };
        let merged = vocab.size();
        vocab.push_merge(a, b);
        for s in seqs.iter_mut() {
            let mut out = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == a && s[i + 1] == b {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(s[i]);
                    i += 1;
                }
            }
            *s = out;
        }
    }
    Ok(vocab)
}

/// One segment-sized row of the training stream.
#[derive(Clone)]
pub struct Segment {
    pub tokens: Vec<usize>,
    /// True where the token is real (not right-padding).
    pub mask: Vec<bool>,
    pub doc_id: usize,
}

/// A batch of segments; `token_ids[row]` is `windows * window_len` long.
pub struct WindowBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub loss_mask: Vec<Vec<bool>>,
    pub doc_ids: Vec<usize>,
    pub windows: usize,
    pub window_len: usize,
}

impl WindowBatch {
    /// Splits one row into its windows.
    pub fn row_windows(&self, row: usize) -> Vec<Vec<usize>> {
        self.token_ids[row]
            .chunks(self.window_len)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Cuts a document into consecutive non-overlapping segments; the final
/// short segment is right-padded with a false loss mask.
pub fn segment_document(tokens: &[usize], segment_len: usize, doc_id: usize) -> Vec<Segment> {
    assert!(segment_len > 0);
    let mut out = Vec::new();
    for chunk in tokens.chunks(segment_len) {
        let mut t = chunk.to_vec();
        let mut m = vec![true; chunk.len()];
        t.resize(segment_len, PAD);
        m.resize(segment_len, false);
        out.push(Segment { tokens: t, mask: m, doc_id });
    }
    out
}

pub fn filter_min_length(docs: Vec<Vec<usize>>, min_tokens: usize) -> Vec<Vec<usize>> {
    docs.into_iter().filter(|d| d.len() >= min_tokens).collect()
}

/// Shuffles segments with ChaCha8 keyed on `seed + epoch` and groups them
/// into batches. During training incomplete final batches are dropped
/// (stable shapes); during eval they are kept.
pub fn make_batches(
    segments: &[Segment],
    batch_size: usize,
    window_len: usize,
    seed: u64,
    epoch: u64,
    drop_last: bool,
) -> Vec<WindowBatch> {
    assert!(batch_size > 0 && window_len > 0);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch));
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for group in order.chunks(batch_size) {
        if drop_last && group.len() < batch_size {
            break;
        }
        let rows: Vec<&Segment> = group.iter().map(|&i| &segments[i]).collect();
        let seg_len = rows[0].tokens.len();
        debug_assert!(seg_len % window_len == 0, "segment_len must be a multiple of W");
        out.push(WindowBatch {
            token_ids: rows.iter().map(|s| s.tokens.clone()).collect(),
            loss_mask: rows.iter().map(|s| s.mask.clone()).collect(),
            doc_ids: rows.iter().map(|s| s.doc_id).collect(),
            windows: seg_len / window_len,
            window_len,
        });
    }
    out
}

/// Loads a corpus: a directory of plain-text files (one document per file,
/// ordered by file name) or a single line-delimited file (one document per
/// line).
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<u8>>> {
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut docs = Vec::with_capacity(names.len());
        for n in names {
            docs.push(fs::read(n)?);
        }
        Ok(docs)
    } else if path.is_file() {
        Ok(fs::read(path)?
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| l.to_vec())
            .collect())
    } else {
        Err(MelodiError::Corpus(format!("no such corpus: {}", path.display())))
    }
}

/// Full pipeline: load, tokenize (bos/eos framed), length-filter, segment.
pub fn prepare_segments(
    docs: &[Vec<u8>],
    vocab: &Vocab,
    segment_len: usize,
    min_doc_tokens: usize,
) -> Vec<Segment> {
    let tokenized: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| {
            let mut t = vec![BOS];
            t.extend(vocab.encode(d));
            t.push(EOS);
            t
        })
        .collect();
    let kept = filter_min_length(tokenized, min_doc_tokens);
    kept.iter()
        .enumerate()
        .flat_map(|(i, t)| segment_document(t, segment_len, i))
        .collect()
}
