//! Query-time embedding modulation over an in-memory matrix, composed with
//! SQLite through a pseudo-function materializer.

pub mod bench;
pub mod embed;
pub mod grammar;
pub mod index;
pub mod kernel;
pub mod metrics;
pub mod modulation;
pub mod sql;
pub mod store;
pub mod synth;
pub mod validate;

pub use embed::{CommandEmbedder, EmbedError, Embedder, HashProjectionEmbedder};
pub use grammar::{parse, GrammarError, ParsedQuery};
pub use index::{CorpusRecord, IndexError, LoadedIndex};
pub use modulation::{run_pipeline, ModulationSpec, PipelineError, ScoredCandidate};
pub use sql::{MaterializeError, QueryContext};
pub use store::{CandidateView, EmbeddingStore, StoreError};
