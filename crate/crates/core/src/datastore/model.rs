//! The sequence-model boundary: anything that can map a translation context
//! to a key vector and a next-token distribution can back the pipeline.
//!
//! The bundled [`ToyModel`] is a fully deterministic stand-in used by the
//! demos and tests: hashed token embeddings, a positional-decay context
//! summary, and a next-token distribution from a fixed random projection
//! blended with a fitted bigram table.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed_index, SeededRng};
use crate::vector::VectorMatrix;
use crate::Matrix;

use super::corpus::ParallelCorpus;

pub trait ModelAdapter: Send + Sync {
    /// Dimensionality of the context keys.
    fn key_dim(&self) -> usize;

    fn src_vocab(&self) -> u32;

    fn tgt_vocab(&self) -> u32;

    /// Representation of the translation context `(src, prefix)`; the
    /// datastore key for the token that follows `prefix`.
    fn context_key(&self, src: &[u32], prefix: &[u32]) -> Vec<f32>;

    /// Next-token distribution over the target vocabulary; sums to 1.
    fn mt_distribution(&self, src: &[u32], prefix: &[u32]) -> Vec<f32>;

    /// Per-source-token encoder vectors, `|src| x key_dim`; sentence keys
    /// average these rows.
    fn encoder_states(&self, src: &[u32]) -> Matrix;
}

/// Keys live on a sphere of this radius so that inter-context squared
/// distances land on the scale the default retrieval temperature (100)
/// expects.
pub const DEFAULT_KEY_SCALE: f32 = 32.0;
const PREFIX_DECAY: f32 = 0.7;
/// Weight of the source mean in the context direction; keeps empty-prefix
/// contexts of different sources apart despite the shared BOS component.
const SRC_WEIGHT: f32 = 3.0;
const BIGRAM_ALPHA: f32 = 0.5;
const BIGRAM_BLEND: f32 = 0.5;

pub struct ToyModel {
    d: usize,
    src_vocab: u32,
    tgt_vocab: u32,
    key_scale: f32,
    src_emb: Matrix,
    tgt_emb: Matrix,
    bos_emb: Vec<f32>,
    /// Seed for the per-position sign patterns salting prefix embeddings.
    pos_seed: u64,
    /// `tgt_vocab x d` projection generating the model logits.
    proj: Matrix,
    /// `(tgt_vocab + 1) x tgt_vocab` row-stochastic table; the extra row is
    /// the begin-of-sentence context. Absent until fitted.
    bigram: Option<Vec<f32>>,
}

impl ToyModel {
    pub fn new(src_vocab: u32, tgt_vocab: u32, d: usize, seed: u64) -> Result<Self> {
        if d < 8 {
            return Err(Error::invalid_argument(format!(
                "toy model needs d >= 8, got {d}"
            )));
        }
        if src_vocab == 0 || tgt_vocab == 0 {
            return Err(Error::invalid_argument("vocabulary sizes must be >= 1"));
        }
        let src_emb = embedding_table(src_vocab as usize, d, derive_seed(seed, "toy-src"));
        let tgt_emb = embedding_table(tgt_vocab as usize, d, derive_seed(seed, "toy-tgt"));
        let bos_emb = embedding_row(d, derive_seed(seed, "toy-bos"));
        let proj = embedding_table(tgt_vocab as usize, d, derive_seed(seed, "toy-proj"));
        Ok(ToyModel {
            d,
            src_vocab,
            tgt_vocab,
            key_scale: DEFAULT_KEY_SCALE,
            src_emb,
            tgt_emb,
            bos_emb,
            pos_seed: derive_seed(seed, "toy-pos"),
            proj,
            bigram: None,
        })
    }

    /// Fit the bigram component on a training corpus (add-alpha smoothed).
    pub fn fit_bigrams(&mut self, corpus: &ParallelCorpus) -> Result<()> {
        if corpus.tgt_vocab() > self.tgt_vocab {
            return Err(Error::invalid_argument(format!(
                "corpus target vocabulary {} exceeds model vocabulary {}",
                corpus.tgt_vocab(),
                self.tgt_vocab
            )));
        }
        let v = self.tgt_vocab as usize;
        let mut counts = vec![0f32; (v + 1) * v];
        for (_, tgt) in corpus.iter() {
            let mut prev = v; // begin-of-sentence row
            for &tok in tgt {
                counts[prev * v + tok as usize] += 1.0;
                prev = tok as usize;
            }
        }
        for row in counts.chunks_exact_mut(v) {
            let total: f32 = row.iter().sum::<f32>() + BIGRAM_ALPHA * v as f32;
            for c in row.iter_mut() {
                *c = (*c + BIGRAM_ALPHA) / total;
            }
        }
        self.bigram = Some(counts);
        Ok(())
    }

    pub fn with_bigrams(mut self, corpus: &ParallelCorpus) -> Result<Self> {
        self.fit_bigrams(corpus)?;
        Ok(self)
    }

    fn context_direction(&self, src: &[u32], prefix: &[u32]) -> Vec<f32> {
        let mut v = vec![0f32; self.d];
        if !src.is_empty() {
            let inv = SRC_WEIGHT / src.len() as f32;
            for &t in src {
                for (acc, e) in v.iter_mut().zip(self.src_emb.row(t as usize)) {
                    *acc += e * inv;
                }
            }
        }
        // Virtual BOS then the prefix tokens, decayed toward the oldest.
        // Each position salts its embedding with a deterministic sign
        // pattern, so the same token at a different position contributes an
        // uncorrelated direction and distinct contexts stay far apart.
        let mut weight = 1.0f32;
        for (j, &t) in prefix.iter().enumerate().rev() {
            let emb = self.tgt_emb.row(t as usize);
            let mut word = 0u64;
            for (lane, acc) in v.iter_mut().enumerate() {
                if lane % 64 == 0 {
                    word = derive_seed_index(self.pos_seed, "salt", ((j as u64) << 16) | (lane / 64) as u64);
                }
                let sign = if word & 1 == 1 { 1.0f32 } else { -1.0 };
                word >>= 1;
                *acc += weight * sign * emb[lane];
            }
            weight *= PREFIX_DECAY;
        }
        for (acc, e) in v.iter_mut().zip(&self.bos_emb) {
            *acc += weight * e;
        }
        v
    }
}

impl ModelAdapter for ToyModel {
    fn key_dim(&self) -> usize {
        self.d
    }

    fn src_vocab(&self) -> u32 {
        self.src_vocab
    }

    fn tgt_vocab(&self) -> u32 {
        self.tgt_vocab
    }

    fn context_key(&self, src: &[u32], prefix: &[u32]) -> Vec<f32> {
        let mut v = self.context_direction(src, prefix);
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-12 {
            let s = self.key_scale / norm;
            v.iter_mut().for_each(|x| *x *= s);
        } else {
            let bos_norm: f32 = self.bos_emb.iter().map(|x| x * x).sum::<f32>().sqrt();
            v = self
                .bos_emb
                .iter()
                .map(|x| x * self.key_scale / bos_norm)
                .collect();
        }
        v
    }

    fn mt_distribution(&self, src: &[u32], prefix: &[u32]) -> Vec<f32> {
        let dir = self.context_direction(src, prefix);
        let norm: f32 = dir.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        let v = self.tgt_vocab as usize;
        let mut logits = Vec::with_capacity(v);
        for t in 0..v {
            let row = self.proj.row(t);
            let mut acc = 0f32;
            for (a, b) in row.iter().zip(&dir) {
                acc += a * b;
            }
            logits.push(acc / norm);
        }
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut probs: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f32 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);

        if let Some(bigram) = &self.bigram {
            let row = match prefix.last() {
                Some(&t) => t as usize,
                None => v,
            };
            let table = &bigram[row * v..(row + 1) * v];
            for (p, b) in probs.iter_mut().zip(table) {
                *p = (1.0 - BIGRAM_BLEND) * *p + BIGRAM_BLEND * b;
            }
        }
        probs
    }

    fn encoder_states(&self, src: &[u32]) -> Matrix {
        let mut out = VectorMatrix::with_dim(self.d);
        for &t in src {
            out.push_row(self.src_emb.row(t as usize));
        }
        out
    }
}

fn embedding_table(rows: usize, d: usize, seed: u64) -> Matrix {
    let mut data = Vec::with_capacity(rows * d);
    let inv = 1.0 / (d as f64).sqrt();
    for r in 0..rows {
        let mut rng = SeededRng::new(derive_seed_index(seed, "row", r as u64));
        for _ in 0..d {
            data.push((rng.next_gaussian() * inv) as f32);
        }
    }
    VectorMatrix::new(rows, d, data).expect("table shape")
}

fn embedding_row(d: usize, seed: u64) -> Vec<f32> {
    embedding_table(1, d, seed).row(0).to_vec()
}
