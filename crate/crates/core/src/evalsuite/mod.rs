//! Recovery metrics against known latents, the probe, and the perturbation
//! prediction battery.

mod perturb;
mod recovery;
mod report;
mod stats;

pub use perturb::{
    auc_roc, auprc, de_auc_auprc, delta_pearson, mae_condition, masked_auc_auprc, pseudobulk_r2,
    pseudobulk_r2_means, rmse_condition, DeltaPearson,
};
pub use recovery::{
    assignment_exhaustive, assignment_hungarian, linear_block_fit, mcc_nu, probe_grounding, split_rows, LinearFit,
    Mcc, ProbeConfig, ProbeReport, RecoveryReport, PROBE_MIN_ROWS,
};
pub use report::{
    fold_report, perturb_metrics, ConditionPrediction, EvaluationReport, FoldReport, PerturbMetrics, TimeMetrics,
};
pub use stats::{average_ranks, mean, pearson, r2_score, spearman, Corr};
