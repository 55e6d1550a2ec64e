//! Persisted value tokens: the flattened target side of the corpus, one
//! entry per (sentence, position), in corpus order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

use super::corpus::ParallelCorpus;

pub const TOKEN_STORE_MAGIC: &[u8; 4] = b"KSVL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStore {
    tokens: Vec<u32>,
    /// Start offset of each sentence's span; strictly increasing because
    /// empty targets are rejected at corpus validation.
    starts: Vec<u64>,
}

impl TokenStore {
    pub fn from_corpus(corpus: &ParallelCorpus) -> Self {
        let mut tokens = Vec::new();
        let mut starts = Vec::with_capacity(corpus.len());
        for (_, tgt) in corpus.iter() {
            starts.push(tokens.len() as u64);
            tokens.extend_from_slice(tgt);
        }
        TokenStore { tokens, starts }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn sentence_count(&self) -> usize {
        self.starts.len()
    }

    #[inline]
    pub fn token(&self, id: u64) -> u32 {
        self.tokens[id as usize]
    }

    #[inline]
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// `(start, length)` of sentence `i`'s token span.
    pub fn span(&self, i: usize) -> (u64, u64) {
        let start = self.starts[i];
        let end = self
            .starts
            .get(i + 1)
            .copied()
            .unwrap_or(self.tokens.len() as u64);
        (start, end - start)
    }

    pub fn sentence_tokens(&self, i: usize) -> &[u32] {
        let (start, len) = self.span(i);
        &self.tokens[start as usize..(start + len) as usize]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = ByteWriter::new(BufWriter::new(file));
        w.write_magic(TOKEN_STORE_MAGIC)?;
        w.write_u64(self.tokens.len() as u64)?;
        w.write_u64(self.starts.len() as u64)?;
        w.write_u64_slice(&self.starts)?;
        w.write_u32_slice(&self.tokens)?;
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = ByteReader::new(BufReader::new(file));
        r.expect_magic(TOKEN_STORE_MAGIC)?;
        let at = r.offset();
        let count = r.read_u64()? as usize;
        let sentences = r.read_u64()? as usize;
        if sentences > count {
            return Err(Error::format(
                at,
                format!("{sentences} sentences cannot hold {count} tokens"),
            ));
        }
        let starts = r.read_u64_vec(sentences)?;
        for (i, w) in starts.windows(2).enumerate() {
            if w[0] >= w[1] {
                return Err(Error::format(
                    at,
                    format!("sentence offsets not strictly increasing at {i}"),
                ));
            }
        }
        if let Some(&first) = starts.first() {
            if first != 0 {
                return Err(Error::format(at, "first sentence offset must be 0"));
            }
        }
        if let Some(&last) = starts.last() {
            if last >= count as u64 {
                return Err(Error::format(at, "last sentence offset beyond token count"));
            }
        }
        let tokens = r.read_u32_vec(count)?;
        Ok(TokenStore { tokens, starts })
    }
}
