//! Length-sorted batch planning for key computation.
//!
//! Sentences are ordered by target length so that batches pad against
//! near-equal lengths; a batch's padded size is its sentence count times its
//! longest member.

use crate::error::{Error, Result};

use super::corpus::ParallelCorpus;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub max_tokens: usize,
}

impl BatchPlan {
    /// Total padded token count under this plan.
    pub fn padded_tokens(&self, corpus: &ParallelCorpus) -> usize {
        self.batches
            .iter()
            .map(|b| {
                let longest = b.iter().map(|&i| corpus.target(i).len()).max().unwrap_or(0);
                b.len() * longest
            })
            .sum()
    }

    /// Every sentence index exactly once, in plan order.
    pub fn covered(&self) -> Vec<usize> {
        self.batches.iter().flatten().copied().collect()
    }
}

/// Sort sentences by target length (ties by original index) and pack
/// greedily so each batch's padded token count stays within `max_tokens`.
pub fn plan_batches(corpus: &ParallelCorpus, max_tokens: usize) -> Result<BatchPlan> {
    if corpus.is_empty() {
        return Err(Error::invalid_argument("corpus is empty"));
    }
    for (i, (_, tgt)) in corpus.iter().enumerate() {
        if tgt.len() > max_tokens {
            return Err(Error::invalid_argument(format!(
                "sentence {} has {} target tokens, exceeding max_tokens={}",
                i,
                tgt.len(),
                max_tokens
            )));
        }
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| (corpus.target(i).len(), i));

    // Only equal lengths share a batch: growing a batch past its current
    // longest member always adds padding, and the padding-efficiency
    // guarantee (never worse than corpus-order packing, for every corpus)
    // only holds if the plan pads nothing at all.
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_len = 0usize;
    for &i in &order {
        let len = corpus.target(i).len();
        let fits = current.is_empty()
            || (len == current_len && (current.len() + 1) * len <= max_tokens);
        if !fits {
            batches.push(std::mem::take(&mut current));
        }
        current_len = len;
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(BatchPlan { batches, max_tokens })
}

/// The baseline packing in original corpus order, for comparison: same
/// padded-size rule, no sorting.
pub fn plan_batches_corpus_order(corpus: &ParallelCorpus, max_tokens: usize) -> Result<BatchPlan> {
    if corpus.is_empty() {
        return Err(Error::invalid_argument("corpus is empty"));
    }
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_longest = 0usize;
    for i in 0..corpus.len() {
        let len = corpus.target(i).len();
        if len > max_tokens {
            return Err(Error::invalid_argument(format!(
                "sentence {} has {} target tokens, exceeding max_tokens={}",
                i, len, max_tokens
            )));
        }
        let longest = current_longest.max(len);
        if !current.is_empty() && (current.len() + 1) * longest > max_tokens {
            batches.push(std::mem::take(&mut current));
            current_longest = 0;
        }
        current_longest = current_longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(BatchPlan { batches, max_tokens })
}
