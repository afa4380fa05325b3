//! Byte-level tokenization, corpus ingestion, fixed-length packing and
//! synthetic task generation.

pub mod tasks;
pub mod text;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};
use crate::seed::derive_seed;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const BYTE_VOCAB: usize = 259;

pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize_bytes`]; special ids are dropped.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn detokenize_lossy(ids: &[usize]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}

/// A document wrapped as `BOS bytes EOS`.
pub fn document(text: &[u8]) -> Vec<usize> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(tokenize_bytes(text));
    out.push(EOS);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStream {
    pub source: String,
    pub tokens: Vec<usize>,
}

impl TokenStream {
    pub fn from_documents(source: impl Into<String>, docs: &[Vec<u8>]) -> Self {
        TokenStream {
            source: source.into(),
            tokens: docs.iter().flat_map(|d| document(d)).collect(),
        }
    }

    /// Deterministically shuffles document order before concatenation.
    pub fn from_shuffled_documents(source: impl Into<String>, docs: &[Vec<u8>], seed: u64) -> Self {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        TokenStream {
            source: source.into(),
            tokens: order.iter().flat_map(|&i| document(&docs[i])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads a file (one document) or a directory tree (one document per file,
/// sorted by path).
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u8>>> {
    let meta = std::fs::metadata(path).map_err(|e| FocalError::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![
            std::fs::read(path).map_err(|e| FocalError::io(path, e))?
        ]);
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut docs = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| FocalError::io(&f, e))?;
        if !bytes.is_empty() {
            docs.push(bytes);
        }
    }
    if docs.is_empty() {
        return Err(FocalError::Data(format!(
            "no documents under {}",
            path.display()
        )));
    }
    Ok(docs)
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| FocalError::io(dir, e))? {
        let entry = entry.map_err(|e| FocalError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// One training sequence with next-token targets. Targets equal to [`PAD`]
/// are masked out of the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub sequences: Vec<Sequence>,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.inputs.len()).sum()
    }
}

/// Fixed-length sequences cut from a token stream.
#[derive(Debug, Clone)]
pub struct PackedDataset {
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sequences: Vec<Sequence>,
}

/// Cuts `stream` into `⌊len/seq_len⌋` sequences (remainder dropped). The
/// target of the last position is the next stream token when one exists;
/// positions whose input is `EOS` get a `PAD` target.
pub fn pack(
    stream: &[usize],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PackedDataset> {
    if seq_len == 0 || batch_size == 0 {
        return Err(FocalError::Config(
            "seq_len and batch_size must be positive".into(),
        ));
    }
    if stream.len() < seq_len {
        return Err(FocalError::Data(format!(
            "corpus of {} tokens is shorter than one sequence of {seq_len}",
            stream.len()
        )));
    }
    let n = stream.len() / seq_len;
    let sequences = (0..n)
        .map(|i| {
            let start = i * seq_len;
            let inputs = stream[start..start + seq_len].to_vec();
            let targets = (0..seq_len)
                .map(|j| {
                    if inputs[j] == EOS {
                        PAD
                    } else {
                        stream.get(start + j + 1).copied().unwrap_or(PAD)
                    }
                })
                .collect();
            Sequence { inputs, targets }
        })
        .collect();
    Ok(PackedDataset {
        seq_len,
        batch_size,
        seed,
        sequences,
    })
}

impl PackedDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.len() * self.seq_len
    }

    /// Carves a seeded validation slice of up to `n_batches` batches off the
    /// dataset. At least one training batch is left behind.
    pub fn split_validation(mut self, n_batches: usize) -> Result<(PackedDataset, Vec<Batch>)> {
        let want = n_batches * self.batch_size;
        if self.sequences.len() < self.batch_size + 1 {
            return Err(FocalError::Data(format!(
                "only {} sequences; need more than one batch of {}",
                self.sequences.len(),
                self.batch_size
            )));
        }
        let take = want.min(self.sequences.len() - self.batch_size);
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            "validation",
        )));
        let (val_idx, _) = order.split_at(take);
        let mut val_mask = vec![false; self.sequences.len()];
        val_idx.iter().for_each(|&i| val_mask[i] = true);
        let mut val = Vec::with_capacity(take);
        let mut train = Vec::with_capacity(self.sequences.len() - take);
        for (i, s) in self.sequences.into_iter().enumerate() {
            if val_mask[i] {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        self.sequences = train;
        let batches = val
            .chunks(self.batch_size)
            .map(|c| Batch {
                sequences: c.to_vec(),
            })
            .collect();
        Ok((self, batches))
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("epoch{epoch}")));
        order.shuffle(&mut rng);
        order
    }

    /// The batch consumed at `step`: a pure function of (seed, step), so a
    /// resumed run sees exactly the batches an uninterrupted run would.
    pub fn batch_at(&self, step: u64) -> Batch {
        let n = self.sequences.len() as u64;
        let bs = self.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        let sequences = (0..bs)
            .map(|j| {
                let global = step * bs + j;
                let epoch = global / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, self.epoch_order(epoch)));
                }
                let order = &cached.as_ref().expect("set above").1;
                self.sequences[order[(global % n) as usize]].clone()
            })
            .collect();
        Batch { sequences }
    }

    /// Batches of one shuffled epoch in order.
    pub fn iter_epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let order = self.epoch_order(epoch);
        let bs = self.batch_size;
        (0..order.len() / bs).map(move |b| Batch {
            sequences: order[b * bs..(b + 1) * bs]
                .iter()
                .map(|&i| self.sequences[i].clone())
                .collect(),
        })
    }
}

/// Settings of the built-in synthetic training mixture: filler prose
/// interleaved with key-value recall documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMix {
    /// Approximate stream length in tokens.
    pub total_tokens: usize,
    /// Fraction of documents that are key-value recall instances.
    #[serde(default = "default_kv_fraction")]
    pub kv_fraction: f64,
    #[serde(default = "default_min_pairs")]
    pub kv_min_pairs: usize,
    #[serde(default = "default_max_pairs")]
    pub kv_max_pairs: usize,
    /// Query lines per recall document; `None` queries every key.
    #[serde(default)]
    pub kv_queries: Option<usize>,
    /// Length range of filler documents, in bytes.
    #[serde(default = "default_filler_bytes")]
    pub filler_bytes: (usize, usize),
}

fn default_kv_fraction() -> f64 {
    0.5
}
fn default_min_pairs() -> usize {
    2
}
fn default_max_pairs() -> usize {
    6
}
fn default_filler_bytes() -> (usize, usize) {
    (120, 600)
}

impl SyntheticMix {
    pub fn new(total_tokens: usize) -> Self {
        SyntheticMix {
            total_tokens,
            kv_fraction: default_kv_fraction(),
            kv_min_pairs: default_min_pairs(),
            kv_max_pairs: default_max_pairs(),
            kv_queries: None,
            filler_bytes: default_filler_bytes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kv_fraction) {
            return Err(FocalError::Config("kv_fraction must lie in [0, 1]".into()));
        }
        if self.kv_min_pairs == 0 || self.kv_min_pairs > self.kv_max_pairs {
            return Err(FocalError::Config(
                "need 1 <= kv_min_pairs <= kv_max_pairs".into(),
            ));
        }
        if self.kv_queries == Some(0) {
            return Err(FocalError::Config("kv_queries must be positive".into()));
        }
        if self.filler_bytes.0 == 0 || self.filler_bytes.0 > self.filler_bytes.1 {
            return Err(FocalError::Config(
                "filler_bytes must be a non-empty range".into(),
            ));
        }
        Ok(())
    }

    /// Generates the token stream. Pure in `(self, seed)`.
    pub fn generate(&self, seed: u64) -> Result<TokenStream> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(self.total_tokens + 1024);
        while tokens.len() < self.total_tokens {
            if rng.gen_bool(self.kv_fraction) {
                let pairs = rng.gen_range(self.kv_min_pairs..=self.kv_max_pairs);
                let queries = self.kv_queries.unwrap_or(pairs).min(pairs);
                tokens.extend(tasks::kv_document(pairs, queries, rng.gen())?);
            } else {
                let len = rng.gen_range(self.filler_bytes.0..=self.filler_bytes.1);
                let t = text::filler_text(&mut rng, len);
                tokens.extend(document(t.as_bytes()));
            }
        }
        Ok(TokenStream {
            source: "synthetic_mix".into(),
            tokens,
        })
    }
}
