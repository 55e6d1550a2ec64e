//! `bench recall|speed` — approximate-search quality and latency against
//! exact float ground truth computed by a brute-force pass.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgMatches, Args};
use rayon::prelude::*;

use knnstore::datastore::KeyStoreReader;
use knnstore::ivf::{IvfPqIndex, SearchParams};
use knnstore::rng::{derive_seed, SeededRng};
use knnstore::vector::squared_l2_unchecked;
use knnstore::Error;

use crate::config::FileConfig;

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Index under test (.ksix).
    #[arg(long)]
    index: PathBuf,

    /// Key store the index was built from; source of queries and exact
    /// ground truth.
    #[arg(long)]
    keys: PathBuf,

    /// Query count (0 = 100 for recall, 1000 for speed).
    #[arg(long, default_value_t = 0)]
    queries: usize,

    /// Neighbors per query.
    #[arg(long, default_value_t = 64)]
    k: usize,

    /// Probed lists (speed bench; recall sweeps powers of two).
    #[arg(long, default_value_t = 32)]
    nprobe: usize,

    /// Noise scale perturbing stored rows into queries, relative to the
    /// per-component magnitude.
    #[arg(long, default_value_t = 0.1)]
    noise: f32,

    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(
    args: BenchArgs,
    m: &ArgMatches,
    file: &FileConfig,
    seed: u64,
    is_recall: bool,
) -> Result<()> {
    let k: usize = file.resolve(m, "k", args.k)?;
    let nprobe: usize = file.resolve(m, "nprobe", args.nprobe)?;
    let noise: f32 = file.resolve(m, "noise", args.noise)?;
    let query_count = match (args.queries, is_recall) {
        (0, true) => 100,
        (0, false) => 1000,
        (q, _) => q,
    };

    let index = IvfPqIndex::load(&args.index)?;
    let mut keys = KeyStoreReader::open(&args.keys)?;
    if keys.dim() != index.dim() {
        return Err(Error::invalid_argument(format!(
            "ground-truth keys have d={} but the index expects d={}",
            keys.dim(),
            index.dim()
        ))
        .into());
    }
    if index.total() == 0 {
        return Err(Error::invalid_state("index is empty").into());
    }

    let queries = make_queries(&mut keys, query_count, noise, derive_seed(seed, "bench"))?;
    eprintln!(
        "computing exact ground truth for {} queries over {} rows...",
        queries.len(),
        keys.rows()
    );
    let gt = exact_ground_truth(&mut keys, &queries, k)?;

    let sweep: Vec<usize> = if is_recall {
        let mut s = Vec::new();
        let mut p = 1usize;
        while p < index.nlist() {
            s.push(p);
            p *= 2;
        }
        s.push(index.nlist());
        s
    } else {
        vec![nprobe.min(index.nlist())]
    };

    let mut csv = String::from("nprobe,k,recall,p50_us,p95_us,qps\n");
    let mut last_recall = -1.0f64;
    for &np in &sweep {
        let params = SearchParams { k, nprobe: np };
        let mut latencies = Vec::with_capacity(queries.len());
        let mut hits = 0usize;
        let mut denom = 0usize;
        let started = Instant::now();
        for (q, truth) in queries.iter().zip(&gt) {
            let t0 = Instant::now();
            let got = index.search(q, &params)?;
            latencies.push(t0.elapsed().as_secs_f64() * 1e6);
            denom += truth.len();
            hits += got.iter().filter(|(id, _)| truth.contains(id)).count();
        }
        let wall = started.elapsed().as_secs_f64();
        latencies.sort_by(|a, b| a.total_cmp(b));
        let recall = hits as f64 / denom.max(1) as f64;
        csv.push_str(&format!(
            "{},{},{:.6},{:.1},{:.1},{:.1}\n",
            np,
            k,
            recall,
            percentile(&latencies, 0.50),
            percentile(&latencies, 0.95),
            queries.len() as f64 / wall.max(1e-12),
        ));
        if is_recall && recall + 1e-12 < last_recall {
            return Err(Error::Internal(format!(
                "recall fell from {last_recall:.6} to {recall:.6} at nprobe={np}"
            ))
            .into());
        }
        last_recall = recall.max(last_recall);
    }

    match &args.out {
        Some(path) => std::fs::write(path, &csv)
            .with_context(|| format!("writing CSV to {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Stored rows perturbed with seeded Gaussian noise.
fn make_queries(
    keys: &mut KeyStoreReader,
    count: usize,
    noise: f32,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let mut rng = SeededRng::new(seed);
    let n = keys.rows() as usize;
    let picks: Vec<u64> = (0..count).map(|_| rng.next_range(n) as u64).collect();
    let mut sorted = picks.clone();
    sorted.sort_unstable();
    sorted.dedup();
    let rows = keys.gather_rows(&sorted)?;
    let lookup = |id: u64| sorted.binary_search(&id).expect("picked id present");
    let d = keys.dim();
    let mut queries = Vec::with_capacity(count);
    for pick in picks {
        let base = rows.row(lookup(pick));
        let scale = noise * (base.iter().map(|v| v * v).sum::<f32>() / d as f32).sqrt();
        let q: Vec<f32> = base
            .iter()
            .map(|v| v + scale * rng.next_gaussian() as f32)
            .collect();
        queries.push(q);
    }
    Ok(queries)
}

/// Exact float kNN by brute force over the whole key store, streamed in
/// chunks. Ties break toward the lower row id.
fn exact_ground_truth(
    keys: &mut KeyStoreReader,
    queries: &[Vec<f32>],
    k: usize,
) -> Result<Vec<Vec<u64>>> {
    let mut best: Vec<Vec<(f32, u64)>> = vec![Vec::with_capacity(k + 1); queries.len()];
    for chunk in 0..keys.num_chunks() {
        let (start, _) = keys.chunk_range(chunk);
        let rows = keys.read_chunk(chunk)?;
        best.par_iter_mut()
            .zip(queries.par_iter())
            .for_each(|(top, q)| {
                for (i, row) in rows.iter_rows().enumerate() {
                    let d = squared_l2_unchecked(q, row);
                    let id = start + i as u64;
                    if top.len() < k {
                        top.push((d, id));
                        if top.len() == k {
                            top.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                        }
                    } else if (d, id) < (top[k - 1].0, top[k - 1].1) {
                        top[k - 1] = (d, id);
                        let mut j = k - 1;
                        while j > 0
                            && (top[j].0, top[j].1) < (top[j - 1].0, top[j - 1].1)
                        {
                            top.swap(j, j - 1);
                            j -= 1;
                        }
                    }
                }
            });
    }
    Ok(best
        .into_iter()
        .map(|mut top| {
            top.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            top.into_iter().map(|(_, id)| id).collect()
        })
        .collect())
}
