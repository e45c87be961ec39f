//! Snapshot tables, preprocessing, leave-one-out folds, batch streams and run configuration.

mod batches;
mod binary;
mod config;
mod dataset;
mod folds;
mod preprocess;

pub use batches::{build_pair_batches, derive_seed, BatchConfig, BatchPlanner, SkippedPair, StepBatch};
pub use binary::{read_matrix_binary, write_matrix_binary, MAGIC};
pub use config::{RunConfig, SEED_ENV};
pub use dataset::{
    load_conditions, load_snapshot_table, pseudobulk, save_snapshot_table, ConditionInfo, ConditionsManifest,
    SnapshotDataset, ValueMode, CONDITIONS_FILE, SNAPSHOT_FILE,
};
pub use folds::{build_loo_folds, clamp_k, de_mask, top_k_abs, FoldSpec};
pub use preprocess::{gene_variances, normalize_counts, select_hvg, NormalizeReport, TARGET_LIBRARY_SIZE};
