//! `translate` — kNN-interpolated beam search over a built datastore stack.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgMatches, Args};
use serde::{Deserialize, Serialize};

use knnstore::datastore::{TokenStore, ToyModel, Vocabulary};
use knnstore::generate::{
    translate, DecodeConfig, KnnConfig, RetrievalMode, SubsetSource, VanillaSource,
};
use knnstore::ivf::IvfPqIndex;
use knnstore::rng::derive_seed;
use knnstore::subset::{retrieve_subset, FlatTokenCodes, SentenceDatastore};
use knnstore::Error;

use crate::config::FileConfig;
use crate::CorpusInput;

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Sources to translate: JSONL with {"src": [ints]} per line.
    #[arg(long, conflicts_with = "text_input")]
    input: Option<PathBuf>,

    /// Sources to translate as whitespace-tokenized text (needs --vocab).
    #[arg(long, requires = "vocab")]
    text_input: Option<PathBuf>,

    /// Vocabulary JSON written by `build values --vocab-out`.
    #[arg(long)]
    vocab: Option<PathBuf>,

    /// The corpus the datastore was built from; fixes the model's
    /// vocabulary and fits its bigram component.
    #[command(flatten)]
    train: CorpusInput,

    /// Token index (.ksix); required in vanilla mode unless lambda is 0.
    #[arg(long)]
    index: Option<PathBuf>,

    /// Value token store (.ksvl); required whenever retrieval is active.
    #[arg(long)]
    values: Option<PathBuf>,

    /// Sentence datastore (.kssd); required in subset mode.
    #[arg(long)]
    sentence_index: Option<PathBuf>,

    /// Flat token codes (.kspq); required in subset mode.
    #[arg(long)]
    flat: Option<PathBuf>,

    /// Retrieval mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Vanilla)]
    mode: ModeArg,

    /// Toy-model key dimensionality (must match the build).
    #[arg(long, default_value_t = 64)]
    d: usize,

    /// Neighbors retrieved per decoding step.
    #[arg(long, default_value_t = 64)]
    k: usize,

    /// Probed IVF lists per query.
    #[arg(long, default_value_t = 32)]
    nprobe: usize,

    /// Retrieval softmax temperature.
    #[arg(long, default_value_t = 100.0)]
    tau: f32,

    /// Weight of the retrieval distribution.
    #[arg(long, default_value_t = 0.4)]
    lambda: f32,

    /// Neighbor sentences per source in subset mode.
    #[arg(long, default_value_t = 512)]
    n: usize,

    /// Beam width.
    #[arg(long, default_value_t = 5)]
    beam: usize,

    /// Length penalty applied to final hypothesis scores.
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f32,

    /// Hard cap on generated length (0 = 2*|src| + 10).
    #[arg(long, default_value_t = 0)]
    max_len: usize,

    /// Output records, one JSON object per source.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Vanilla,
    Subset,
}

#[derive(Serialize)]
struct Record<'a> {
    src: &'a [u32],
    hyp: &'a [u32],
    score: f32,
    steps: usize,
    knn_hits: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    hyp_text: Option<String>,
}

#[derive(Serialize)]
struct Summary {
    mode: RetrievalMode,
    lambda: f32,
    sentences: usize,
    tokens: usize,
    wall_s: f64,
    tok_s: f64,
    fallback_steps: usize,
    /// Per-hypothesis retrieval: every live hypothesis queries the store at
    /// every step.
    retrieval: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    subset_sizes: Option<Vec<usize>>,
}

fn read_sources(args: &TranslateArgs, vocab: Option<&Vocabulary>) -> Result<Vec<Vec<u32>>> {
    if let Some(path) = &args.input {
        #[derive(Deserialize)]
        struct Line {
            src: Vec<u32>,
        }
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line)
                .with_context(|| format!("line {} of {}", i + 1, path.display()))?;
            out.push(rec.src);
        }
        return Ok(out);
    }
    if let Some(path) = &args.text_input {
        let vocab = vocab.ok_or_else(|| Error::invalid_argument("--text-input needs --vocab"))?;
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            out.push(vocab.encode_src(&line?)?);
        }
        return Ok(out);
    }
    Err(Error::invalid_argument("pass --input FILE or --text-input FILE").into())
}

pub fn run(args: TranslateArgs, m: &ArgMatches, file: &FileConfig, seed: u64) -> Result<()> {
    let d: usize = file.resolve(m, "d", args.d)?;
    let knn = KnnConfig {
        k: file.resolve(m, "k", args.k)?,
        tau: file.resolve(m, "tau", args.tau)?,
        lambda: file.resolve(m, "lambda", args.lambda)?,
        nprobe: file.resolve(m, "nprobe", args.nprobe)?,
        subset_n: Some(file.resolve(m, "n", args.n)?),
        mode: match args.mode {
            ModeArg::Vanilla => RetrievalMode::Vanilla,
            ModeArg::Subset => RetrievalMode::Subset,
        },
    };
    knn.validate()?;
    let beam: usize = file.resolve(m, "beam", args.beam)?;
    let length_penalty: f32 = file.resolve(m, "length_penalty", args.length_penalty)?;
    let max_len: usize = file.resolve(m, "max_len", args.max_len)?;

    let (train_corpus, built_vocab) = args.train.load()?;
    let vocab = match &args.vocab {
        Some(p) => Some(Vocabulary::load(p)?),
        None => built_vocab,
    };
    let model = ToyModel::new(
        train_corpus.src_vocab(),
        train_corpus.tgt_vocab(),
        d,
        derive_seed(seed, "model"),
    )?
    .with_bigrams(&train_corpus)?;

    let retrieving = knn.lambda > 0.0;
    let values = match (&args.values, retrieving) {
        (Some(p), _) => Some(TokenStore::load(p)?),
        (None, true) => {
            return Err(Error::invalid_argument("retrieval needs --values (token store)").into())
        }
        (None, false) => None,
    };

    enum Stack {
        None,
        Vanilla(IvfPqIndex<f32>),
        Subset(SentenceDatastore, FlatTokenCodes),
    }
    let stack = if !retrieving {
        Stack::None
    } else {
        match knn.mode {
            RetrievalMode::Vanilla => {
                let path = args.index.as_ref().ok_or_else(|| {
                    Error::invalid_argument("vanilla mode needs --index (.ksix)")
                })?;
                Stack::Vanilla(IvfPqIndex::load(path)?)
            }
            RetrievalMode::Subset => {
                let sp = args.sentence_index.as_ref().ok_or_else(|| {
                    Error::invalid_argument("subset mode needs --sentence-index (.kssd)")
                })?;
                let fp = args.flat.as_ref().ok_or_else(|| {
                    Error::invalid_argument("subset mode needs --flat (.kspq)")
                })?;
                let sd = SentenceDatastore::load(sp)?;
                let flat = FlatTokenCodes::load(fp)?;
                if let Some(v) = &values {
                    if flat.len() != v.len() || sd.token_count() != v.len() as u64 {
                        return Err(Error::invalid_argument(format!(
                            "artifact mismatch: {} flat codes, {} spanned tokens, {} values",
                            flat.len(),
                            sd.token_count(),
                            v.len()
                        ))
                        .into());
                    }
                }
                Stack::Subset(sd, flat)
            }
        }
    };

    let sources = read_sources(&args, vocab.as_ref())?;
    let out_file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = std::io::BufWriter::new(out_file);

    let started = Instant::now();
    let mut tokens = 0usize;
    let mut fallback_steps = 0usize;
    let mut subset_sizes: Vec<usize> = Vec::new();
    for src in &sources {
        let decode = DecodeConfig {
            beam,
            length_penalty,
            max_len: if max_len == 0 { 2 * src.len() + 10 } else { max_len },
            eos: knnstore::datastore::EOS_ID,
        };
        let output = match &stack {
            Stack::None => translate(&model, None, src, &knn, &decode)?,
            Stack::Vanilla(index) => {
                let source = VanillaSource {
                    index,
                    values: values.as_ref().expect("validated"),
                    nprobe: knn.nprobe,
                };
                translate(&model, Some(&source), src, &knn, &decode)?
            }
            Stack::Subset(sd, flat) => {
                let view = retrieve_subset(
                    sd,
                    flat,
                    values.as_ref().expect("validated"),
                    &model,
                    src,
                    knn.subset_n.unwrap_or(512),
                    knn.nprobe,
                )?;
                subset_sizes.push(view.len());
                let source = SubsetSource { flat, view: &view };
                translate(&model, Some(&source), src, &knn, &decode)?
            }
        };
        tokens += output.tokens.len();
        fallback_steps += output.fallbacks;
        let record = Record {
            src,
            hyp: &output.tokens,
            score: output.score,
            steps: output.steps,
            knn_hits: &output.knn_hits,
            hyp_text: vocab.as_ref().map(|v| v.decode_tgt(&output.tokens)),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let wall_s = started.elapsed().as_secs_f64();
    let summary = Summary {
        mode: knn.mode,
        lambda: knn.lambda,
        sentences: sources.len(),
        tokens,
        wall_s,
        tok_s: if wall_s > 0.0 { tokens as f64 / wall_s } else { 0.0 },
        fallback_steps,
        retrieval: "per-hypothesis",
        subset_sizes: (knn.mode == RetrievalMode::Subset && retrieving).then_some(subset_sizes),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
