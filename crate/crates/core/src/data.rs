//! Byte-level tokenization and deterministic batch streaming.
//!
//! Each epoch visits every valid window start exactly once, in an order given
//! by a permutation seeded from `(seed, epoch)`. Batch `i` is a pure function
//! of `(corpus, seq_len, seed, i, batch_size)`, so two runs configured alike
//! see the same sequence regardless of what else they do.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Byte values map to ids `0..256`; id 256 is reserved for padding.
pub const PAD_ID: usize = 256;
pub const VOCAB_SIZE: usize = 257;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize`]. Padding ids are dropped.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .filter(|&&id| id != PAD_ID)
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Index {
                what: "token id",
                index: id,
                limit: VOCAB_SIZE,
            })
        })
        .collect()
}

/// Inputs and next-token targets, both row-major `[batch_size, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn num_tokens(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    doc: u32,
    offset: u32,
}

#[derive(Debug, Clone)]
pub struct TokenStream {
    sources: Vec<PathBuf>,
    documents: Vec<Vec<usize>>,
    windows: Vec<Window>,
    seq_len: usize,
    seed: u64,
    cursor: u64,
    epoch_cache: Option<(u64, Vec<u32>)>,
}

impl TokenStream {
    /// Reads each file as one document.
    pub fn from_files<P: AsRef<Path>>(paths: &[P], seq_len: usize, seed: u64) -> Result<Self> {
        let mut docs = Vec::with_capacity(paths.len());
        for p in paths {
            let bytes = fs::read(p.as_ref()).map_err(|e| Error::io(p.as_ref(), e))?;
            docs.push(bytes);
        }
        let mut stream = Self::from_documents(docs, seq_len, seed)?;
        stream.sources = paths.iter().map(|p| p.as_ref().to_path_buf()).collect();
        Ok(stream)
    }

    pub fn from_documents(docs: Vec<Vec<u8>>, seq_len: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        let documents: Vec<Vec<usize>> = docs.iter().map(|d| tokenize(d)).collect();
        let mut windows = Vec::new();
        for (di, doc) in documents.iter().enumerate() {
            if doc.len() > seq_len {
                windows.extend((0..doc.len() - seq_len).map(|o| Window {
                    doc: di as u32,
                    offset: o as u32,
                }));
            }
        }
        if windows.is_empty() {
            let len = documents.iter().map(Vec::len).max().unwrap_or(0);
            return Err(Error::CorpusTooShort {
                len,
                needed: seq_len + 1,
            });
        }
        Ok(Self {
            sources: Vec::new(),
            documents,
            windows,
            seq_len,
            seed,
            cursor: 0,
            epoch_cache: None,
        })
    }

    pub fn sources(&self) -> &[PathBuf] {
        &self.sources
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    /// All corpus tokens, document after document.
    pub fn corpus_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.documents.iter().flatten().copied()
    }

    /// Number of batches drawn so far through [`next_batch`](Self::next_batch).
    pub fn position(&self) -> u64 {
        self.cursor
    }

    /// Moves the cursor so the next call returns batch `index`.
    pub fn seek(&mut self, index: u64) {
        self.cursor = index;
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Batch {
        let b = self.batch_at(self.cursor, batch_size);
        self.cursor += 1;
        b
    }

    /// Batch number `index` of the stream, independent of the cursor.
    pub fn batch_at(&mut self, index: u64, batch_size: usize) -> Batch {
        let s = self.seq_len;
        let mut inputs = Vec::with_capacity(batch_size * s);
        let mut targets = Vec::with_capacity(batch_size * s);
        let n = self.windows.len() as u64;
        for row in 0..batch_size as u64 {
            let global = index * batch_size as u64 + row;
            let (epoch, pos) = (global / n, (global % n) as usize);
            let slot = self.permutation(epoch)[pos] as usize;
            let w = self.windows[slot];
            let (inp, tgt) = self.slice(w);
            inputs.extend_from_slice(inp);
            targets.extend_from_slice(tgt);
        }
        Batch {
            batch_size,
            seq_len: s,
            inputs,
            targets,
        }
    }

    /// Window at an unshuffled position `(document, offset)`.
    pub fn window(&self, doc: usize, offset: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let d = self.documents.get(doc).ok_or(Error::Index {
            what: "document",
            index: doc,
            limit: self.documents.len(),
        })?;
        if offset + self.seq_len >= d.len() {
            return Err(Error::Index {
                what: "window offset",
                index: offset,
                limit: d.len().saturating_sub(self.seq_len),
            });
        }
        let (i, t) = self.slice(Window {
            doc: doc as u32,
            offset: offset as u32,
        });
        Ok((i.to_vec(), t.to_vec()))
    }

    fn slice(&self, w: Window) -> (&[usize], &[usize]) {
        let doc = &self.documents[w.doc as usize];
        let o = w.offset as usize;
        (&doc[o..o + self.seq_len], &doc[o + 1..o + 1 + self.seq_len])
    }

    fn permutation(&mut self, epoch: u64) -> &[u32] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<u32> = (0..self.windows.len() as u32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            perm.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, perm));
        }
        &self.epoch_cache.as_ref().expect("just filled").1
    }
}

/// SHA-256 over the first `n` batches (inputs then targets, little-endian
/// u16 per token). Does not move the stream's cursor.
pub fn stream_digest(stream: &mut TokenStream, n: u64, batch_size: usize) -> String {
    let mut h = Sha256::new();
    for i in 0..n {
        let b = stream.batch_at(i, batch_size);
        for &t in b.inputs.iter().chain(&b.targets) {
            h.update((t as u16).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
