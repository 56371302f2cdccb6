//! Partitioned active learning for entity resolution.
//!
//! The pipeline works on two record collections `R` and `S` that have been
//! embedded once by a bi-encoder:
//!
//! 1. [`ann`] indexes the `S` embeddings with HNSW for top-k blocking.
//! 2. [`partition`] samples `R`, picks a logarithmic chunk count and splits
//!    the sample with spherical K-Means.
//! 3. [`active`] builds one candidate pool per chunk, a fixed stratified
//!    validation set and a seed set, then runs a short active-learning loop
//!    per chunk with the hybrid confident/confused query strategy.
//! 4. [`resolve`] runs the recall model and the lexical precision model as a
//!    cascade over held-out records and scores the result.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, HTTP and the CLI
//! live in the `aler` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod active;
pub mod ann;
pub mod embedding;
mod error;
pub mod features;
mod math;
pub mod mlp;
pub mod oracle;
pub mod partition;
pub mod record;
pub mod resolve;
pub mod synth;

pub use active::{
    build_pools, build_validation, early_stop, plan_validation, run, select_pairs,
    select_with_strategy, BudgetLedger, CandidatePool, IterationRecord, LabeledPair, LabeledSet,
    LoopConfig, QueryStrategy, RunData, RunError, TrainedArtifacts,
};
pub use ann::{brute_force_knn, AnnIndex, HnswParams, Neighbor};
pub use embedding::EmbeddingMatrix;
pub use error::Error;
pub use features::{interaction_vector, jaro_winkler, lexical_feature_vector, LexicalFeaturizer};
pub use mlp::{optimal_threshold, predict_batch, train, MlpModel, ThresholdResult, TrainConfig};
pub use oracle::{
    GroundTruthOracle, LabelBatch, Oracle, OracleBudget, OracleError, Progress, Provenance,
};
pub use partition::{chunk_count, kmeans_partition, sample_records, ChunkSet, SamplePlan};
pub use record::{CandidatePair, MatchSet, Record, RecordCollection};
pub use resolve::{evaluate, f1_score, generate_candidates, resolve, Metrics, Resolution, ResolvedMatch};

pub type Result<T, E = Error> = core::result::Result<T, E>;
