//! Retrieval-interpolated generation: turn retrieved neighbors into a token
//! distribution, mix it linearly with the model distribution, and decode
//! greedily or with beam search.

use crate::datastore::{ModelAdapter, TokenStore};
use crate::error::{Error, Result};
use crate::ivf::{IvfPqIndex, SearchParams};
use crate::subset::{subset_search, FlatTokenCodes, SubsetView};

/// How token retrieval is performed during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Vanilla,
    Subset,
}

/// Retrieval-side hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Softmax temperature over negative squared distances.
    pub tau: f32,
    /// Weight of the retrieval distribution in the linear mix.
    pub lambda: f32,
    /// Probed inverted lists per query (vanilla mode).
    pub nprobe: usize,
    /// Neighbor sentences assembled per source (subset mode).
    pub subset_n: Option<usize>,
    pub mode: RetrievalMode,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 64,
            tau: 100.0,
            lambda: 0.4,
            nprobe: 32,
            subset_n: None,
            mode: RetrievalMode::Vanilla,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid_argument("k must be >= 1"));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::invalid_argument("tau must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid_argument("lambda must lie in [0, 1]"));
        }
        if self.nprobe == 0 {
            return Err(Error::invalid_argument("nprobe must be >= 1"));
        }
        if self.mode == RetrievalMode::Subset && self.subset_n == Some(0) {
            return Err(Error::invalid_argument("subset size must be >= 1"));
        }
        Ok(())
    }
}

/// Retrieved `(value token, distance)` pairs, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pairs: Vec<(u32, f32)>,
}

impl NeighborSet {
    pub fn new(pairs: Vec<(u32, f32)>) -> Result<Self> {
        for w in pairs.windows(2) {
            if w[0].1 > w[1].1 {
                return Err(Error::invalid_argument("neighbor distances must ascend"));
            }
        }
        if pairs.iter().any(|&(_, d)| d < 0.0 || !d.is_finite()) {
            return Err(Error::invalid_argument("neighbor distances must be finite and >= 0"));
        }
        Ok(NeighborSet { pairs })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(u32, f32)] {
        &self.pairs
    }
}

/// The retrieval distribution: per value token, the normalized sum of
/// `exp(-distance / tau)` over its occurrences among the neighbors.
///
/// An empty neighbor set is an invalid-state error; callers treat it as the
/// signal to fall back to the model distribution alone.
pub fn pknn(neighbors: &NeighborSet, tau: f32, vocab_size: usize) -> Result<Vec<f32>> {
    if neighbors.is_empty() {
        return Err(Error::invalid_state("empty neighbor set"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid_argument("tau must be > 0"));
    }
    let mut weights = vec![0f64; vocab_size];
    let mut total = 0f64;
    for &(value, dist) in &neighbors.pairs {
        if value as usize >= vocab_size {
            return Err(Error::invalid_argument(format!(
                "neighbor value {value} outside vocabulary of {vocab_size}"
            )));
        }
        let w = (-(dist as f64) / tau as f64).exp();
        weights[value as usize] += w;
        total += w;
    }
    if total <= 0.0 {
        // All weights underflowed; fall back to counting occurrences.
        for &(value, _) in &neighbors.pairs {
            weights[value as usize] += 1.0;
        }
        total = neighbors.len() as f64;
    }
    Ok(weights.into_iter().map(|w| (w / total) as f32).collect())
}

/// Linear interpolation `lambda * p_knn + (1 - lambda) * p_mt`.
pub fn interpolate(p_knn: &[f32], p_mt: &[f32], lambda: f32) -> Result<Vec<f32>> {
    if p_knn.len() != p_mt.len() {
        return Err(Error::invalid_argument(format!(
            "distribution lengths differ: {} vs {}",
            p_knn.len(),
            p_mt.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid_argument("lambda must lie in [0, 1]"));
    }
    Ok(p_knn
        .iter()
        .zip(p_mt)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

/// Anything that can answer a k-nearest-neighbor query with token values.
pub trait NeighborSource {
    fn neighbors(&self, query: &[f32], k: usize) -> Result<NeighborSet>;
}

/// Vanilla retrieval: the full IVFPQ index, values resolved through the
/// token store.
pub struct VanillaSource<'a> {
    pub index: &'a IvfPqIndex<f32>,
    pub values: &'a TokenStore,
    pub nprobe: usize,
}

impl NeighborSource for VanillaSource<'_> {
    fn neighbors(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        let hits = self.index.search(
            query,
            &SearchParams { k, nprobe: self.nprobe.min(self.index.nlist()) },
        )?;
        NeighborSet::new(
            hits.into_iter()
                .map(|(id, dist)| (self.values.token(id), dist))
                .collect(),
        )
    }
}

/// Subset retrieval: one pre-assembled view scanned per query.
pub struct SubsetSource<'a> {
    pub flat: &'a FlatTokenCodes,
    pub view: &'a SubsetView,
}

impl NeighborSource for SubsetSource<'_> {
    fn neighbors(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        if self.view.is_empty() {
            return NeighborSet::new(Vec::new());
        }
        let hits = subset_search(self.view, self.flat, query, k)?;
        NeighborSet::new(hits.into_iter().map(|(_, dist, value)| (value, dist)).collect())
    }
}

/// Decoding controls independent of retrieval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub length_penalty: f32,
    pub max_len: usize,
    pub eos: u32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 5, length_penalty: 1.0, max_len: 256, eos: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationOutput {
    /// Generated target tokens, ending with EOS when decoding terminated
    /// naturally.
    pub tokens: Vec<u32>,
    /// Length-penalized score of the selected hypothesis.
    pub score: f32,
    pub steps: usize,
    /// Neighbors retrieved at each step, summed over live hypotheses.
    pub knn_hits: Vec<usize>,
    /// Steps where retrieval came back empty and the model distribution was
    /// used alone.
    pub fallbacks: usize,
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    logp: f64,
}

fn penalized(logp: f64, len: usize, penalty: f32) -> f64 {
    logp / (len.max(1) as f64).powf(penalty as f64)
}

/// Beam decoding with per-hypothesis retrieval at every step.
///
/// With `lambda == 0` retrieval is skipped entirely, so the output is
/// bitwise independent of whatever `source` holds.
pub fn translate(
    model: &dyn ModelAdapter,
    source: Option<&dyn NeighborSource>,
    src: &[u32],
    knn: &KnnConfig,
    decode: &DecodeConfig,
) -> Result<TranslationOutput> {
    knn.validate()?;
    if decode.beam == 0 {
        return Err(Error::invalid_argument("beam must be >= 1"));
    }
    if decode.max_len == 0 {
        return Err(Error::invalid_argument("max_len must be >= 1"));
    }
    let vocab = model.tgt_vocab() as usize;
    let retrieving = knn.lambda > 0.0 && source.is_some();

    let mut live = vec![Hypothesis { tokens: Vec::new(), logp: 0.0 }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut knn_hits = Vec::new();
    let mut fallbacks = 0usize;
    let mut steps = 0usize;

    while steps < decode.max_len && !live.is_empty() {
        steps += 1;
        let mut step_hits = 0usize;
        // (neg logp is ordered ascending via total_cmp on (logp desc, hyp, token))
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h_idx, hyp) in live.iter().enumerate() {
            let p_mt = model.mt_distribution(src, &hyp.tokens);
            let probs = if retrieving {
                let query = model.context_key(src, &hyp.tokens);
                let neighbors = source
                    .expect("retrieving implies source")
                    .neighbors(&query, knn.k)?;
                step_hits += neighbors.len();
                if neighbors.is_empty() {
                    fallbacks += 1;
                    p_mt
                } else {
                    let p_k = pknn(&neighbors, knn.tau, vocab)?;
                    interpolate(&p_k, &p_mt, knn.lambda)?
                }
            } else {
                p_mt
            };
            // Expand with the 2*beam most probable tokens (ties: lower id).
            let breadth = (2 * decode.beam).min(vocab);
            let mut order: Vec<u32> = (0..vocab as u32).collect();
            order.sort_by(|&a, &b| {
                probs[b as usize]
                    .total_cmp(&probs[a as usize])
                    .then(a.cmp(&b))
            });
            for &token in order.iter().take(breadth) {
                let p = probs[token as usize].max(1e-12) as f64;
                candidates.push((hyp.logp + p.ln(), h_idx, token));
            }
        }
        knn_hits.push(step_hits);

        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        // EOS candidates retire to the finished pool; the live beam refills
        // with the best continuing candidates so strong paths are never
        // truncated by other hypotheses finishing early.
        let mut next = Vec::with_capacity(decode.beam);
        let mut retired = 0usize;
        for &(logp, h_idx, token) in &candidates {
            if next.len() == decode.beam && retired >= decode.beam {
                break;
            }
            let is_eos = token == decode.eos;
            if is_eos && retired >= decode.beam {
                continue;
            }
            if !is_eos && next.len() == decode.beam {
                continue;
            }
            let mut tokens = live[h_idx].tokens.clone();
            tokens.push(token);
            if is_eos {
                let score = penalized(logp, tokens.len(), decode.length_penalty);
                finished.push((tokens, score));
                retired += 1;
            } else {
                next.push(Hypothesis { tokens, logp });
            }
        }
        live = next;
    }

    // Hypotheses still live at the cap compete with their penalized scores.
    for hyp in live {
        let score = penalized(hyp.logp, hyp.tokens.len(), decode.length_penalty);
        finished.push((hyp.tokens, score));
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.1.total_cmp(&b.1).then(ib.cmp(ia)))
        .map(|(_, x)| x)
        .ok_or_else(|| Error::Internal("no hypothesis produced".into()))?;

    Ok(TranslationOutput {
        tokens: best.0,
        score: best.1 as f32,
        steps,
        knn_hits,
        fallbacks,
    })
}
