use std::path::Path;

use serde::{Deserialize, Serialize};

use super::perturb::{
    de_auc_auprc, delta_pearson, mae_condition, masked_auc_auprc, pseudobulk_r2_means, rmse_condition,
};
use super::recovery::{ProbeReport, RecoveryReport};
use super::stats::mean;
use crate::dataio::{clamp_k, pseudobulk};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Predicted and observed cells of one test (condition, time).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPrediction {
    pub condition: String,
    pub time: usize,
    /// rows paired with `obs` by index
    pub pred: Matrix<f64>,
    pub obs: Matrix<f64>,
    pub ctrl_mean: Vec<f64>,
}

/// The perturbation battery averaged over a set of (condition, time) groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbMetrics {
    pub rmse: f64,
    pub pseudobulk_r2: Option<f64>,
    pub mae: f64,
    pub delta_pearson: f64,
    /// ΔPearson restricted to the fold DE mask
    pub delta_pearson_de: Option<f64>,
    /// labels from each condition's own top-K shift
    pub auc_roc: f64,
    pub auprc: f64,
    /// labels from the training-fold DE mask
    pub auc_roc_fold_mask: Option<f64>,
    pub auprc_fold_mask: Option<f64>,
    pub k: usize,
    pub n_groups: usize,
    pub skipped_cells: usize,
}

impl PerturbMetrics {
    /// (name, value) pairs in a fixed order; absent values are NaN.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let o = |v: Option<f64>| v.unwrap_or(f64::NAN);
        vec![
            ("rmse", self.rmse),
            ("pseudobulk_r2", o(self.pseudobulk_r2)),
            ("mae", self.mae),
            ("delta_pearson", self.delta_pearson),
            ("delta_pearson_de", o(self.delta_pearson_de)),
            ("auc_roc", self.auc_roc),
            ("auprc", self.auprc),
            ("auc_roc_fold_mask", o(self.auc_roc_fold_mask)),
            ("auprc_fold_mask", o(self.auprc_fold_mask)),
        ]
    }
}

/// Applies every metric to `groups`. `de_genes` are column indices into the
/// group matrices; `k` is clamped below the gene count.
pub fn perturb_metrics(groups: &[ConditionPrediction], k: usize, de_genes: Option<&[usize]>) -> Result<PerturbMetrics> {
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let g = groups[0].obs.cols();
    let k = clamp_k(k, g);
    let mut mask = vec![false; g];
    let usable_mask = de_genes.filter(|d| !d.is_empty() && d.len() < g);
    if let Some(d) = usable_mask {
        for &i in d {
            *mask.get_mut(i).ok_or_else(|| Error::Dimension(format!("DE gene {i} ≥ {g}")))? = true;
        }
    }
    let (mut rmse, mut mae, mut dp, mut dp_de, mut auc, mut ap, mut aucm, mut apm) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut means = Vec::new();
    let mut skipped = 0;
    for grp in groups {
        let p = pseudobulk(&grp.pred, &(0..grp.pred.rows()).collect::<Vec<_>>());
        let o = pseudobulk(&grp.obs, &(0..grp.obs.rows()).collect::<Vec<_>>());
        rmse.push(rmse_condition(&grp.pred, &grp.obs)?);
        mae.push(mae_condition(&grp.pred, &grp.obs, &grp.ctrl_mean)?);
        let n = grp.pred.rows().min(grp.obs.rows());
        let idx: Vec<usize> = (0..n).collect();
        let (pp, oo) = (grp.pred.select_rows(&idx), grp.obs.select_rows(&idx));
        let d = delta_pearson(&pp, &oo, &grp.ctrl_mean, None)?;
        skipped += d.skipped;
        if d.scored > 0 {
            dp.push(d.value);
        }
        if let Some(genes) = usable_mask.filter(|d| d.len() >= 2) {
            let d = delta_pearson(&pp, &oo, &grp.ctrl_mean, Some(genes))?;
            if d.scored > 0 {
                dp_de.push(d.value);
            }
        }
        let (a, b) = de_auc_auprc(&o, &grp.ctrl_mean, &p, k)?;
        auc.push(a);
        ap.push(b);
        if usable_mask.is_some() {
            let (a, b) = masked_auc_auprc(&mask, &grp.ctrl_mean, &p)?;
            aucm.push(a);
            apm.push(b);
        }
        means.push((p, o));
    }
    let opt = |v: &[f64]| if v.is_empty() { None } else { Some(mean(v)) };
    Ok(PerturbMetrics {
        rmse: mean(&rmse),
        pseudobulk_r2: pseudobulk_r2_means(&means).ok(),
        mae: mean(&mae),
        delta_pearson: mean(&dp),
        delta_pearson_de: opt(&dp_de),
        auc_roc: mean(&auc),
        auprc: mean(&ap),
        auc_roc_fold_mask: opt(&aucm),
        auprc_fold_mask: opt(&apm),
        k,
        n_groups: groups.len(),
        skipped_cells: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeMetrics {
    pub time: usize,
    pub metrics: PerturbMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: String,
    pub metrics: PerturbMetrics,
    pub per_time: Vec<TimeMetrics>,
    /// training condition whose embedding stood in for the held-out one
    pub embedding_fallback: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub folds: Vec<FoldReport>,
    /// every fold's test groups pooled
    pub pooled: Option<PerturbMetrics>,
    pub recovery: Option<RecoveryReport>,
    pub probe: Option<ProbeReport>,
    /// why recovery metrics are missing, when they are
    pub recovery_note: Option<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Per-fold metrics plus per-time breakdowns.
pub fn fold_report(
    held_out: &str,
    groups: &[ConditionPrediction],
    k: usize,
    de_genes: Option<&[usize]>,
    embedding_fallback: Option<String>,
) -> Result<FoldReport> {
    let metrics = perturb_metrics(groups, k, de_genes)?;
    let mut times: Vec<usize> = groups.iter().map(|g| g.time).collect();
    times.sort_unstable();
    times.dedup();
    let per_time = times
        .into_iter()
        .map(|t| {
            let sub: Vec<ConditionPrediction> = groups.iter().filter(|g| g.time == t).cloned().collect();
            Ok(TimeMetrics {
                time: t,
                metrics: perturb_metrics(&sub, k, de_genes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldReport {
        held_out: held_out.to_string(),
        metrics,
        per_time,
        embedding_fallback,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `fold,metric,value` row per fold and metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,metric,value\n");
        for f in &self.folds {
            for (name, v) in f.metrics.named() {
                s.push_str(&format!("{},{name},{v}\n", f.held_out));
            }
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let j = dir.join("evaluation.json");
        std::fs::write(&j, self.to_json()?).map_err(|e| Error::io(&j, e))?;
        let c = dir.join("metrics.csv");
        std::fs::write(&c, self.to_csv()).map_err(|e| Error::io(&c, e))
    }
}
