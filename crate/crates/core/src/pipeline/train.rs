use serde::{Deserialize, Serialize};

use crate::dataio::{derive_seed, BatchConfig, BatchPlanner, RunConfig, SkippedPair, SnapshotDataset};
use crate::error::{Error, Result};
use crate::genmodel::{ModelConfig, ModelParams};
use crate::numcore::AdamState;
use crate::objective::{total_loss_and_grad, LossReport, LossWeights};

/// Which weighted terms to switch off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    Alignment,
    Sparsity,
    Both,
}

impl Ablation {
    pub fn apply(self, mut w: LossWeights) -> LossWeights {
        if matches!(self, Ablation::Alignment | Ablation::Both) {
            w.lambda_align = 0.0;
        }
        if matches!(self, Ablation::Sparsity | Ablation::Both) {
            w.lambda_reg = 0.0;
        }
        w
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "alignment" => Ok(Ablation::Alignment),
            "sparsity" => Ok(Ablation::Sparsity),
            "both" => Ok(Ablation::Both),
            other => Err(Error::InvalidArgument(format!("unknown ablation `{other}`"))),
        }
    }
}

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub condition: String,
    pub time: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub steps: usize,
    /// mean total loss over the last epoch
    pub final_loss: f64,
    pub skipped: Vec<SkippedPair>,
    /// matched couplings that fell back to independent pairing
    pub unmatched: Vec<(String, String, usize)>,
}

/// Architecture for a dataset whose ordinal time labels run 0..=T.
pub fn model_config_for(ds: &SnapshotDataset, conditions: &[String], cfg: &RunConfig) -> Result<ModelConfig> {
    let n_times = ds.times().len();
    if n_times < 2 {
        return Err(Error::InvalidArgument("training needs at least two time points".into()));
    }
    let mc = ModelConfig {
        d_iota: cfg.d_iota,
        d_nu: cfg.d_nu,
        p: ds.n_genes(),
        d_u: cfg.d_u,
        hidden: cfg.hidden,
        horizon: n_times - 1,
        conditions: conditions.to_vec(),
    };
    mc.validate()?;
    Ok(mc)
}

pub fn batch_config(cfg: &RunConfig) -> BatchConfig {
    BatchConfig {
        batch_size: cfg.batch_size,
        temporal: cfg.temporal_coupling,
        align: cfg.align_coupling,
        sinkhorn: cfg.sinkhorn,
        ot_subsample: cfg.ot_subsample,
    }
}

/// Minimizes the total loss with Adam, one batch per (condition, t−1 → t)
/// per epoch. `on_step` sees every step before the update is applied.
pub fn train_model(
    ds: &SnapshotDataset,
    conditions: &[String],
    cfg: &RunConfig,
    ablation: Ablation,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let weights = ablation.apply(cfg.weights);
    let mc = model_config_for(ds, conditions, cfg)?;
    let mut params = ModelParams::init(mc, derive_seed(cfg.seed, &[10]))?;
    let planner = BatchPlanner::new(ds, conditions, batch_config(cfg), derive_seed(cfg.seed, &[11]))?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.learning_rate);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let batches = planner.epoch(derive_seed(cfg.seed, &[12, epoch as u64]))?;
        let mut epoch_sum = 0.0;
        for b in &batches {
            let noise = derive_seed(cfg.seed, &[13, step as u64]);
            let (report, grad) = total_loss_and_grad(&params, &b.pair, b.align.as_ref(), &weights, noise)
                .map_err(|e| Error::TrainingStep { step, detail: e.to_string() })?;
            if !report.total.is_finite() {
                return Err(Error::TrainingStep {
                    step,
                    detail: format!("loss is {}", report.total),
                });
            }
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::TrainingStep {
                    step,
                    detail: format!("non-finite gradient at coordinate {i}"),
                });
            }
            epoch_sum += report.total;
            on_step(&StepLog {
                step,
                epoch,
                condition: b.pair.condition.clone(),
                time: b.pair.time,
                report,
            })?;
            adam.update(&mut flat, &grad)?;
            params.assign(&flat)?;
            step += 1;
        }
        final_loss = epoch_sum / batches.len() as f64;
    }
    Ok(TrainResult {
        params,
        steps: step,
        final_loss,
        skipped: planner.skipped.clone(),
        unmatched: planner.unmatched.clone(),
    })
}
