//! Training, prediction, evaluation and diagnosis drivers over the core modules.

mod diagnose;
mod evaluate;
mod gradcheck;
mod predict;
mod train;

pub use diagnose::{diagnose_model, encoded_latents, score_block_report, state_pairs_from_latents, DiagnoseReport, EnvDiagnosis, StatePairs};
pub use evaluate::{evaluate_folds, model_fold_groups, recovery_metrics, spread_rows, table_fold_groups, FoldGroups, RecoveryOutcome};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport, TrialReport};
pub use predict::{encode_means, predict_cells, resolve_embedding, rollout_latent, EmbeddingChoice};
pub use train::{batch_config, model_config_for, train_model, Ablation, StepLog, TrainResult};
