//! The three-stage datastore build: store values, compute keys through a
//! model adapter with length-sorted batching, build the IVFPQ index from the
//! key store in streaming passes.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ivf::{train_ivfpq, IvfPqIndex, IvfTrainConfig};
use crate::rng::{derive_seed, SeededRng};
use crate::vector::VectorMatrix;
use crate::Matrix;

use super::batch::BatchPlan;
use super::corpus::ParallelCorpus;
use super::key_store::{KeyStoreReader, KeyStoreWriter};
use super::model::ModelAdapter;
use super::token_store::TokenStore;

/// Per-stage wall-clock seconds for a datastore build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub compute_keys: f64,
    pub train_index: f64,
    pub build_index: f64,
    pub total: f64,
}

impl TimingReport {
    pub fn new(compute_keys: f64, train_index: f64, build_index: f64) -> Self {
        TimingReport {
            compute_keys,
            train_index,
            build_index,
            total: compute_keys + train_index + build_index,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// Human-readable table with one row per stage.
    pub fn text_table(&self) -> String {
        let rows = [
            ("Compute keys", self.compute_keys),
            ("Train IVFPQ", self.train_index),
            ("Build IVFPQ", self.build_index),
            ("Total", self.total),
        ];
        let mut out = String::from("Stage         Time (sec)\n");
        for (name, secs) in rows {
            out.push_str(&format!("{name:<13} {secs:>10.1}\n"));
        }
        out
    }
}

/// Stage 1: flatten and persist the value tokens.
pub fn store_values(corpus: &ParallelCorpus, path: impl AsRef<Path>) -> Result<TokenStore> {
    if corpus.is_empty() {
        return Err(Error::invalid_argument("corpus is empty"));
    }
    let store = TokenStore::from_corpus(corpus);
    store.save(path)?;
    Ok(store)
}

/// Stage 2: run every `(sentence, prefix)` context through the model and
/// persist one key row per target token.
///
/// Batches exist only to group work; rows are written at their canonical
/// corpus-order offsets, so the output bytes are identical for every batch
/// plan and thread count. Returns the elapsed seconds.
pub fn compute_keys(
    model: &dyn ModelAdapter,
    corpus: &ParallelCorpus,
    plan: &BatchPlan,
    path: impl AsRef<Path>,
    chunk_rows: u32,
) -> Result<f64> {
    let started = Instant::now();
    let mut covered = plan.covered();
    covered.sort_unstable();
    if covered != (0..corpus.len()).collect::<Vec<_>>() {
        return Err(Error::invalid_argument(
            "batch plan does not cover the corpus exactly once",
        ));
    }
    if corpus.src_vocab() > model.src_vocab() || corpus.tgt_vocab() > model.tgt_vocab() {
        return Err(Error::invalid_argument(format!(
            "corpus vocabulary ({}, {}) exceeds model vocabulary ({}, {})",
            corpus.src_vocab(),
            corpus.tgt_vocab(),
            model.src_vocab(),
            model.tgt_vocab()
        )));
    }

    let mut starts = Vec::with_capacity(corpus.len());
    let mut total = 0u64;
    for (_, tgt) in corpus.iter() {
        starts.push(total);
        total += tgt.len() as u64;
    }

    let d = model.key_dim();
    let mut writer = KeyStoreWriter::create(path, d as u32, total, chunk_rows)?;
    for batch in &plan.batches {
        let rows: Vec<(usize, Matrix)> = batch
            .par_iter()
            .map(|&sentence| {
                let src = corpus.source(sentence);
                let tgt = corpus.target(sentence);
                let mut keys = VectorMatrix::with_dim(d);
                for t in 1..=tgt.len() {
                    keys.push_row(&model.context_key(src, &tgt[..t - 1]));
                }
                (sentence, keys)
            })
            .collect();
        for (sentence, keys) in rows {
            writer.write_rows_at(starts[sentence], &keys)?;
        }
    }
    writer.finish()?;
    Ok(started.elapsed().as_secs_f64())
}

/// Stage 3: train on a bounded seeded sample, then stream every key chunk
/// into the index and persist it.
///
/// `compute_keys_secs` is the stage-2 time this build is reporting alongside
/// its own measurements (the stages may have run in separate invocations).
pub fn build_index(
    keys: &mut KeyStoreReader,
    cfg: &IvfTrainConfig,
    out_path: impl AsRef<Path>,
    compute_keys_secs: f64,
) -> Result<(IvfPqIndex<f32>, TimingReport)> {
    let count = keys.rows();
    if count == 0 {
        return Err(Error::invalid_state("key store is empty"));
    }

    let train_started = Instant::now();
    let cap = 256u64 * cfg.nlist as u64;
    let sample = if count > cap {
        let mut rng = SeededRng::new(derive_seed(cfg.seed, "train-sample"));
        let idx: Vec<u64> = rng
            .sample_indices(count as usize, cap as usize)
            .into_iter()
            .map(|i| i as u64)
            .collect();
        keys.gather_rows(&idx)?
    } else {
        keys.read_rows(0, count as usize)?
    };
    let mut index = train_ivfpq(&sample, cfg)?;
    drop(sample);
    let train_secs = train_started.elapsed().as_secs_f64();

    let add_started = Instant::now();
    for chunk in 0..keys.num_chunks() {
        let (start, _) = keys.chunk_range(chunk);
        let m = keys.read_chunk(chunk)?;
        index.add(&m, start)?;
    }
    index.save(out_path)?;
    let add_secs = add_started.elapsed().as_secs_f64();

    let report = TimingReport::new(compute_keys_secs, train_secs, add_secs);
    Ok((index, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::batch::{plan_batches, plan_batches_corpus_order};
    use crate::datastore::model::ToyModel;

    fn demo_corpus(sentences: usize, seed: u64) -> ParallelCorpus {
        let mut rng = SeededRng::new(seed);
        let mut pairs = Vec::with_capacity(sentences);
        for _ in 0..sentences {
            let slen = 2 + rng.next_range(6);
            let tlen = 2 + rng.next_range(6);
            let src: Vec<u32> = (0..slen).map(|_| 1 + rng.next_range(40) as u32).collect();
            let mut tgt: Vec<u32> = (0..tlen).map(|_| 1 + rng.next_range(40) as u32).collect();
            tgt.push(0); // end-of-sentence
            pairs.push((src, tgt));
        }
        ParallelCorpus::new(pairs, 48, 48).unwrap()
    }

    #[test]
    fn key_store_is_invariant_to_batch_plan() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = demo_corpus(60, 1);
        let model = ToyModel::new(48, 48, 16, 7).unwrap();
        let p1 = dir.path().join("a.ksky");
        let p2 = dir.path().join("b.ksky");
        let sorted = plan_batches(&corpus, 32).unwrap();
        let baseline = plan_batches_corpus_order(&corpus, 16).unwrap();
        compute_keys(&model, &corpus, &sorted, &p1, 32).unwrap();
        compute_keys(&model, &corpus, &baseline, &p2, 32).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn key_store_is_invariant_to_parallelism_degree() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = demo_corpus(80, 3);
        let model = ToyModel::new(48, 48, 16, 21).unwrap();
        let plan = plan_batches(&corpus, 48).unwrap();
        let p1 = dir.path().join("serial.ksky");
        let p2 = dir.path().join("parallel.ksky");
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        single
            .install(|| compute_keys(&model, &corpus, &plan, &p1, 64))
            .unwrap();
        compute_keys(&model, &corpus, &plan, &p2, 64).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn single_sentence_of_length_one_yields_one_key() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = ParallelCorpus::new(vec![(vec![3], vec![5])], 8, 8).unwrap();
        let model = ToyModel::new(8, 8, 16, 3).unwrap();
        let plan = plan_batches(&corpus, 4).unwrap();
        let p = dir.path().join("k.ksky");
        compute_keys(&model, &corpus, &plan, &p, 16).unwrap();
        let mut r = KeyStoreReader::open(&p).unwrap();
        assert_eq!(r.rows(), 1);
        // The single key is the empty-prefix context.
        assert_eq!(r.read_row(0).unwrap(), model.context_key(&[3], &[]));
    }

    #[test]
    fn key_count_matches_token_store_on_synthetic_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = demo_corpus(1000, 5);
        let model = ToyModel::new(48, 48, 16, 9).unwrap();
        let values = store_values(&corpus, dir.path().join("v.ksvl")).unwrap();
        let plan = plan_batches(&corpus, 64).unwrap();
        let p = dir.path().join("k.ksky");
        compute_keys(&model, &corpus, &plan, &p, 256).unwrap();
        let r = KeyStoreReader::open(&p).unwrap();
        assert_eq!(r.rows(), values.len() as u64);
        assert_eq!(r.rows(), corpus.total_target_tokens());
    }

    #[test]
    fn full_build_census_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = demo_corpus(300, 11);
        let model = ToyModel::new(48, 48, 16, 13).unwrap();
        let plan = plan_batches(&corpus, 64).unwrap();
        let kp = dir.path().join("k.ksky");
        compute_keys(&model, &corpus, &plan, &kp, 128).unwrap();

        let mut cfg = IvfTrainConfig::new(8, 4, 16, 21);
        cfg.coarse_iters = 10;
        cfg.pq_iters = 10;
        let i1 = dir.path().join("a.ksix");
        let i2 = dir.path().join("b.ksix");
        let mut reader = KeyStoreReader::open(&kp).unwrap();
        let (index, report) = build_index(&mut reader, &cfg, &i1, 1.5).unwrap();
        assert_eq!(index.total(), corpus.total_target_tokens());
        assert!(report.train_index >= 0.0 && report.build_index >= 0.0);
        assert!((report.total - (1.5 + report.train_index + report.build_index)).abs() < 1e-9);

        let mut reader2 = KeyStoreReader::open(&kp).unwrap();
        build_index(&mut reader2, &cfg, &i2, 0.0).unwrap();
        assert_eq!(std::fs::read(&i1).unwrap(), std::fs::read(&i2).unwrap());
    }

    #[test]
    fn report_has_exactly_the_expected_rows() {
        let r = TimingReport::new(1.0, 2.0, 3.0);
        let json = r.to_json();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        let obj = parsed.as_object().unwrap();
        assert_eq!(obj.len(), 4);
        assert_eq!(obj["total"].as_f64().unwrap(), 6.0);
        // Rows appear in stage order in the serialized report.
        let positions: Vec<usize> = ["compute_keys", "train_index", "build_index", "total"]
            .iter()
            .map(|k| json.find(k).unwrap_or_else(|| panic!("missing row {k}")))
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "row order: {json}");
        let table = r.text_table();
        for name in ["Compute keys", "Train IVFPQ", "Build IVFPQ", "Total"] {
            assert!(table.contains(name), "missing row {name} in:\n{table}");
        }
    }
}
