//! Online incremental classification on frozen embeddings.
//!
//! Embeddings are expanded by a frozen random projection followed by a
//! nonlinearity, streamed once into a Gram matrix and an unnormalized
//! class-prototype matrix, and decoded with a ridge solve into decorrelated
//! prototypes. The crate also carries the comparison baselines (nearest class
//! mean, linear probes trained with Adam and cosine annealing), the
//! class-incremental and domain-incremental evaluation harness, and synthetic
//! data generators for running everything without audio.

pub mod baselines;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod manifest;
pub mod metrics;
pub mod projection;
pub mod ridge;
pub mod seeds;
pub mod stats;
pub mod synth;

pub use baselines::{LinearProbe, NcmModel, ProbeHyper, ProbeMode};
pub use embedding::{read_batch, write_batch, EmbeddingBatch, SplitSet};
pub use error::{Error, Result};
pub use harness::{
    run_ablation, run_protocol, AblationReport, AblationVariant, Experiment, ExperimentConfig,
    Method, RunRecord,
};
pub use manifest::{load_manifest, ProtocolKind, ProtocolManifest, TaskSpec};
pub use metrics::{aggregate_runs, average_accuracy, average_forgetting, MetricsLedger, Report};
pub use projection::{FeatureBatch, FeatureMap, Nonlinearity, ProjectionMatrix};
pub use ridge::{
    learn_task, predict, select_lambda, solve_head, LambdaMode, LambdaSearch, RidgeHead,
    LAMBDA_GRID,
};
pub use stats::SufficientStats;
