//! `build values|keys|index|sentence-index` — the staged datastore pipeline.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgMatches, Args};
use serde::{Deserialize, Serialize};

use knnstore::datastore::{
    build_index, compute_keys, plan_batches, store_values, KeyStoreReader, ToyModel,
};
use knnstore::ivf::IvfTrainConfig;
use knnstore::rng::derive_seed;
use knnstore::subset::{build_flat_codes, build_sentence_datastore, FlatCodesConfig};

use crate::config::FileConfig;
use crate::CorpusInput;

/// Sidecar next to a key store recording how long stage 2 took, so stage 3
/// can report it alongside its own timings.
#[derive(Serialize, Deserialize)]
struct KeysTiming {
    compute_keys: f64,
}

fn timing_sidecar(keys_path: &std::path::Path) -> PathBuf {
    let mut os = keys_path.as_os_str().to_owned();
    os.push(".timing.json");
    PathBuf::from(os)
}

#[derive(Args, Debug)]
pub struct ValuesArgs {
    #[command(flatten)]
    input: CorpusInput,

    /// Output token store (.ksvl).
    #[arg(long)]
    out: PathBuf,

    /// Where to write the vocabulary built by the text loader.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

pub fn run_values(args: ValuesArgs, _seed: u64) -> Result<()> {
    let (corpus, vocab) = args.input.load()?;
    let store = store_values(&corpus, &args.out)?;
    if let Some(path) = &args.vocab_out {
        match vocab {
            Some(v) => v.save(path)?,
            None => anyhow::bail!("--vocab-out requires text input (JSONL corpora carry no words)"),
        }
    }
    eprintln!(
        "stored {} value tokens from {} sentences -> {}",
        store.len(),
        store.sentence_count(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct KeysArgs {
    #[command(flatten)]
    input: CorpusInput,

    /// Key dimensionality of the toy model.
    #[arg(long, default_value_t = 64)]
    d: usize,

    /// Padded-token budget per batch.
    #[arg(long, default_value_t = 4096)]
    max_tokens: usize,

    /// Rows per key-store chunk.
    #[arg(long, default_value_t = 8192)]
    chunk_rows: u32,

    /// Output key store (.ksky).
    #[arg(long)]
    out: PathBuf,
}

pub fn run_keys(args: KeysArgs, m: &ArgMatches, file: &FileConfig, seed: u64) -> Result<()> {
    let d: usize = file.resolve(m, "d", args.d)?;
    let max_tokens: usize = file.resolve(m, "max_tokens", args.max_tokens)?;
    let chunk_rows: u32 = file.resolve(m, "chunk_rows", args.chunk_rows)?;

    let (corpus, _) = args.input.load()?;
    let model = ToyModel::new(
        corpus.src_vocab(),
        corpus.tgt_vocab(),
        d,
        derive_seed(seed, "model"),
    )?;
    let plan = plan_batches(&corpus, max_tokens)?;
    let secs = compute_keys(&model, &corpus, &plan, &args.out, chunk_rows)?;
    std::fs::write(
        timing_sidecar(&args.out),
        serde_json::to_string_pretty(&KeysTiming { compute_keys: secs })?,
    )?;
    eprintln!(
        "computed {} keys (d={}) in {:.1}s over {} batches -> {}",
        corpus.total_target_tokens(),
        d,
        secs,
        plan.batches.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Input key store (.ksky).
    #[arg(long)]
    keys: PathBuf,

    /// Output index (.ksix).
    #[arg(long)]
    out: PathBuf,

    /// Coarse IVF partitions.
    #[arg(long, default_value_t = 1024)]
    nlist: usize,

    /// PQ subspaces.
    #[arg(long, default_value_t = 64)]
    m: usize,

    /// Codewords per subspace (max 256; codes are one byte).
    #[arg(long, default_value_t = 256)]
    l: usize,

    /// Learn an OPQ rotation before quantization.
    #[arg(long, default_value_t = false)]
    opq: bool,

    /// Reduce to this dimensionality with PCA first.
    #[arg(long)]
    pca: Option<usize>,

    /// Lloyd iterations for the coarse quantizer.
    #[arg(long, default_value_t = 25)]
    coarse_iters: usize,

    /// Lloyd iterations per PQ subspace.
    #[arg(long, default_value_t = 25)]
    pq_iters: usize,

    /// OPQ outer iterations.
    #[arg(long, default_value_t = 20)]
    opq_iters: usize,

    /// k-means refresh iterations inside each OPQ outer iteration.
    #[arg(long, default_value_t = 10)]
    opq_pq_iters: usize,

    /// Write the timing report as JSON here (text goes to stderr).
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn run_index(args: IndexArgs, m: &ArgMatches, file: &FileConfig, seed: u64) -> Result<()> {
    let cfg = IvfTrainConfig {
        nlist: file.resolve(m, "nlist", args.nlist)?,
        m: file.resolve(m, "m", args.m)?,
        l: file.resolve(m, "l", args.l)?,
        seed: derive_seed(seed, "index"),
        use_opq: file.resolve(m, "opq", args.opq)?,
        pca_dim: args.pca,
        coarse_iters: file.resolve(m, "coarse_iters", args.coarse_iters)?,
        pq_iters: file.resolve(m, "pq_iters", args.pq_iters)?,
        opq_outer_iters: file.resolve(m, "opq_iters", args.opq_iters)?,
        opq_pq_iters: file.resolve(m, "opq_pq_iters", args.opq_pq_iters)?,
    };

    let compute_secs = std::fs::read_to_string(timing_sidecar(&args.keys))
        .ok()
        .and_then(|s| serde_json::from_str::<KeysTiming>(&s).ok())
        .map(|t| t.compute_keys)
        .unwrap_or(0.0);

    let mut reader = KeyStoreReader::open(&args.keys)?;
    let (index, report) = build_index(&mut reader, &cfg, &args.out, compute_secs)?;
    eprint!("{}", report.text_table());
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json())
            .with_context(|| format!("writing report to {}", path.display()))?;
    }
    eprintln!(
        "indexed {} keys into {} lists -> {}",
        index.total(),
        index.nlist(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SentenceIndexArgs {
    #[command(flatten)]
    input: CorpusInput,

    /// Key store the flat token codes are built from (.ksky).
    #[arg(long)]
    keys: PathBuf,

    /// Output sentence datastore (.kssd).
    #[arg(long)]
    out: PathBuf,

    /// Output flat token codes (.kspq).
    #[arg(long)]
    flat_out: PathBuf,

    /// Toy-model dimensionality (must match the key store's builder).
    #[arg(long, default_value_t = 64)]
    d: usize,

    /// Coarse partitions for the sentence index.
    #[arg(long, default_value_t = 32768)]
    nlist: usize,

    /// PQ subspaces for both the sentence index and the flat codes.
    #[arg(long, default_value_t = 64)]
    m: usize,

    /// Codewords per subspace.
    #[arg(long, default_value_t = 256)]
    l: usize,

    /// Disable the OPQ rotation (on by default for subset artifacts).
    #[arg(long, default_value_t = false)]
    no_opq: bool,

    /// OPQ outer iterations.
    #[arg(long, default_value_t = 20)]
    opq_iters: usize,
}

pub fn run_sentence_index(
    args: SentenceIndexArgs,
    m: &ArgMatches,
    file: &FileConfig,
    seed: u64,
) -> Result<()> {
    let d: usize = file.resolve(m, "d", args.d)?;
    let nlist: usize = file.resolve(m, "nlist", args.nlist)?;
    let msub: usize = file.resolve(m, "m", args.m)?;
    let l: usize = file.resolve(m, "l", args.l)?;
    let use_opq = !file.resolve(m, "no_opq", args.no_opq)?;
    let opq_iters: usize = file.resolve(m, "opq_iters", args.opq_iters)?;

    let (corpus, _) = args.input.load()?;
    let model = ToyModel::new(
        corpus.src_vocab(),
        corpus.tgt_vocab(),
        d,
        derive_seed(seed, "model"),
    )?;

    let started = Instant::now();
    let mut cfg = IvfTrainConfig::new(nlist, msub, l, derive_seed(seed, "sentence-index"));
    cfg.use_opq = use_opq;
    cfg.opq_outer_iters = opq_iters;
    let sd = build_sentence_datastore(&model, &corpus, &cfg)?;
    sd.save(&args.out)?;
    eprintln!(
        "sentence datastore: {} sentences over {} tokens in {:.1}s -> {}",
        sd.sentence_count(),
        sd.token_count(),
        started.elapsed().as_secs_f64(),
        args.out.display()
    );

    let started = Instant::now();
    let mut fcfg = FlatCodesConfig::new(msub, l, derive_seed(seed, "flat-codes"));
    fcfg.use_opq = use_opq;
    fcfg.opq_outer_iters = opq_iters;
    let mut reader = KeyStoreReader::open(&args.keys)?;
    let flat = build_flat_codes(&mut reader, &fcfg)?;
    if flat.len() as u64 != sd.token_count() {
        anyhow::bail!(
            "key store holds {} rows but the corpus yields {} tokens; \
             sentence datastore and flat codes must come from the same build",
            flat.len(),
            sd.token_count()
        );
    }
    flat.save(&args.flat_out)?;
    eprintln!(
        "flat token codes: {} entries (M={}) in {:.1}s -> {}",
        flat.len(),
        msub,
        started.elapsed().as_secs_f64(),
        args.flat_out.display()
    );
    Ok(())
}
