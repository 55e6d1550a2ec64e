//! Command-line surface for building and querying kNN token datastores.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use knnstore::Error;

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(
    name = "knnstore",
    version,
    about = "Product-quantized kNN token datastores: staged builds, ADC search, and retrieval-interpolated translation"
)]
struct Cli {
    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads (0 uses all cores; 1 is the deterministic reference
    /// path, though outputs are identical at any setting).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build datastore artifacts stage by stage.
    Build {
        #[command(subcommand)]
        stage: BuildStage,
    },
    /// Translate sources with kNN-interpolated beam search.
    Translate(commands::translate::TranslateArgs),
    /// Ad-hoc nearest-neighbor queries against an index.
    Search(commands::search::SearchArgs),
    /// Recall and latency benchmarks with exact ground truth.
    Bench {
        #[command(subcommand)]
        which: BenchKind,
    },
}

#[derive(Subcommand, Debug)]
enum BuildStage {
    /// Store the value tokens (stage 1).
    Values(commands::build::ValuesArgs),
    /// Compute context keys with length-sorted batching (stage 2).
    Keys(commands::build::KeysArgs),
    /// Train and populate the IVFPQ index (stage 3).
    Index(commands::build::IndexArgs),
    /// Build the sentence datastore and flat token codes for subset mode.
    SentenceIndex(commands::build::SentenceIndexArgs),
}

#[derive(Subcommand, Debug)]
enum BenchKind {
    /// recall@k per nprobe, swept over powers of two.
    Recall(commands::bench::BenchArgs),
    /// Latency distribution and throughput at one nprobe.
    Speed(commands::bench::BenchArgs),
}

/// Common corpus input: a JSONL token-id corpus or parallel text files.
#[derive(Args, Debug, Clone)]
pub struct CorpusInput {
    /// JSONL corpus: one {"src": [ints], "tgt": [ints]} object per line.
    #[arg(long, conflicts_with_all = ["text_src", "text_tgt"])]
    pub corpus: Option<PathBuf>,

    /// Whitespace-tokenized source text (one sentence per line).
    #[arg(long, requires = "text_tgt")]
    pub text_src: Option<PathBuf>,

    /// Whitespace-tokenized target text, parallel to --text-src.
    #[arg(long, requires = "text_src")]
    pub text_tgt: Option<PathBuf>,
}

impl CorpusInput {
    pub fn load(
        &self,
    ) -> knnstore::Result<(
        knnstore::datastore::ParallelCorpus,
        Option<knnstore::datastore::Vocabulary>,
    )> {
        if let Some(path) = &self.corpus {
            let c = knnstore::datastore::ParallelCorpus::from_jsonl(path)?;
            return Ok((c, None));
        }
        match (&self.text_src, &self.text_tgt) {
            (Some(s), Some(t)) => {
                let (c, v) = knnstore::datastore::corpus_from_text(s, t)?;
                Ok((c, Some(v)))
            }
            _ => Err(Error::invalid_argument(
                "no corpus given: pass --corpus FILE or --text-src/--text-tgt",
            )),
        }
    }
}

fn subcommand_matches(matches: &ArgMatches) -> &ArgMatches {
    let (_, mut m) = matches.subcommand().expect("subcommand required");
    while let Some((_, inner)) = m.subcommand() {
        m = inner;
    }
    m
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            e.print().ok();
            return ExitCode::from(2);
        }
    };

    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", render_error(&err));
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// The error chain joined with ": ", skipping causes already embedded in
/// their parent's message.
fn render_error(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if parts.last().map(|p| p.contains(&s)).unwrap_or(false) {
            continue;
        }
        parts.push(s);
    }
    parts.join(": ")
}

/// 2 = usage/validation, 3 = data format, 4 = internal invariant.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Format { .. }) => 3,
        Some(Error::Internal(_)) => 4,
        Some(_) => 2,
        None => 2,
    }
}

fn run(cli: Cli, matches: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let sub = subcommand_matches(matches);
    let threads: usize = file.resolve(matches, "threads", cli.threads)?;
    let seed: u64 = file.resolve(matches, "seed", cli.seed)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }

    match cli.command {
        Command::Build { stage } => match stage {
            BuildStage::Values(args) => commands::build::run_values(args, seed),
            BuildStage::Keys(args) => commands::build::run_keys(args, sub, &file, seed),
            BuildStage::Index(args) => commands::build::run_index(args, sub, &file, seed),
            BuildStage::SentenceIndex(args) => {
                commands::build::run_sentence_index(args, sub, &file, seed)
            }
        },
        Command::Translate(args) => commands::translate::run(args, sub, &file, seed),
        Command::Search(args) => commands::search::run(args, sub, &file),
        Command::Bench { which } => match which {
            BenchKind::Recall(args) => commands::bench::run(args, sub, &file, seed, true),
            BenchKind::Speed(args) => commands::bench::run(args, sub, &file, seed, false),
        },
    }
}
