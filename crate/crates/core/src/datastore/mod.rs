//! Token datastores: the parallel corpus, the persisted value/key stores,
//! batch planning, the model adapter boundary, and the staged build pipeline.

pub mod batch;
pub mod corpus;
pub mod key_store;
pub mod model;
pub mod pipeline;
pub mod token_store;

pub use batch::{plan_batches, plan_batches_corpus_order, BatchPlan};
pub use corpus::{corpus_from_text, ParallelCorpus, Vocabulary, EOS_ID};
pub use key_store::{KeyStoreReader, KeyStoreWriter, DEFAULT_CHUNK_ROWS};
pub use model::{ModelAdapter, ToyModel, DEFAULT_KEY_SCALE};
pub use pipeline::{build_index, compute_keys, store_values, TimingReport};
pub use token_store::TokenStore;
