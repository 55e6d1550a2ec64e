//! `search` — one-off nearest-neighbor queries against a saved index.

use std::path::PathBuf;

use anyhow::Result;
use clap::{ArgMatches, Args};

use knnstore::datastore::{KeyStoreReader, TokenStore};
use knnstore::ivf::{IvfPqIndex, SearchParams};
use knnstore::Error;

use crate::config::FileConfig;

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Index to query (.ksix).
    #[arg(long)]
    index: PathBuf,

    /// Query vector as comma-separated floats.
    #[arg(long, conflicts_with = "query_row")]
    query: Option<String>,

    /// Use row N of --keys as the query.
    #[arg(long, requires = "keys")]
    query_row: Option<u64>,

    /// Key store --query-row reads from.
    #[arg(long)]
    keys: Option<PathBuf>,

    /// Resolve hit ids to value tokens through this token store.
    #[arg(long)]
    values: Option<PathBuf>,

    /// Neighbors to return.
    #[arg(long, default_value_t = 10)]
    k: usize,

    /// Probed IVF lists.
    #[arg(long, default_value_t = 32)]
    nprobe: usize,
}

pub fn run(args: SearchArgs, m: &ArgMatches, file: &FileConfig) -> Result<()> {
    let k: usize = file.resolve(m, "k", args.k)?;
    let nprobe: usize = file.resolve(m, "nprobe", args.nprobe)?;
    let index = IvfPqIndex::load(&args.index)?;

    let query: Vec<f32> = if let Some(text) = &args.query {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f32>()
                    .map_err(|e| Error::invalid_argument(format!("bad query component '{s}': {e}")))
            })
            .collect::<knnstore::Result<_>>()?
    } else if let Some(row) = args.query_row {
        let keys = args.keys.as_ref().expect("clap requires --keys");
        KeyStoreReader::open(keys)?.read_row(row)?
    } else {
        return Err(Error::invalid_argument("pass --query or --query-row").into());
    };

    let values = args.values.as_ref().map(TokenStore::load).transpose()?;
    let params = SearchParams { k, nprobe: nprobe.min(index.nlist()) };
    let hits = index.search(&query, &params)?;
    for (id, dist) in hits {
        match &values {
            Some(v) => println!("{id}\t{dist}\t{}", v.token(id)),
            None => println!("{id}\t{dist}"),
        }
    }
    Ok(())
}
