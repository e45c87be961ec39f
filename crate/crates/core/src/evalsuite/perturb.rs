use serde::{Deserialize, Serialize};

use super::stats::{average_ranks, mean, pearson};
use crate::dataio::top_k_abs;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

fn all_rows(m: &Matrix<f64>) -> Vec<usize> {
    (0..m.rows()).collect()
}

fn col_means(m: &Matrix<f64>) -> Result<Vec<f64>> {
    if m.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(crate::dataio::pseudobulk(m, &all_rows(m)))
}

/// Pooled pseudobulk R² over conditions given as (pred cells, obs cells).
pub fn pseudobulk_r2(pairs: &[(&Matrix<f64>, &Matrix<f64>)]) -> Result<f64> {
    let means = pairs
        .iter()
        .map(|(p, o)| Ok((col_means(p)?, col_means(o)?)))
        .collect::<Result<Vec<_>>>()?;
    pseudobulk_r2_means(&means)
}

/// Same as [`pseudobulk_r2`] on precomputed (pred, obs) means.
pub fn pseudobulk_r2_means(means: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if means.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let g = means[0].1.len();
    let mut grand = vec![0.0; g];
    for (_, o) in means {
        if o.len() != g {
            return Err(Error::Dimension("gene counts differ between conditions".into()));
        }
        grand.iter_mut().zip(o).for_each(|(a, v)| *a += v / means.len() as f64);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, o) in means {
        if p.len() != g {
            return Err(Error::Dimension("prediction gene count differs".into()));
        }
        num += p.iter().zip(o).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        den += o.iter().zip(&grand).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    if den == 0.0 {
        return Err(Error::Degenerate("observed pseudobulks have zero spread".into()));
    }
    Ok(1.0 - num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPearson {
    /// mean over scored cells (NaN when every cell was skipped)
    pub value: f64,
    pub scored: usize,
    /// cells whose shift vector had zero variance
    pub skipped: usize,
}

/// Mean over paired cells of corr(x̂ᵢ − x̄_ctrl, xᵢ − x̄_ctrl), optionally on a gene subset.
/// Row i of `pred` is paired with row i of `obs`.
pub fn delta_pearson(
    pred: &Matrix<f64>,
    obs: &Matrix<f64>,
    ctrl_mean: &[f64],
    genes: Option<&[usize]>,
) -> Result<DeltaPearson> {
    if pred.shape() != obs.shape() || obs.cols() != ctrl_mean.len() {
        return Err(Error::Dimension(format!(
            "pred {:?}, obs {:?}, control mean {}",
            pred.shape(),
            obs.shape(),
            ctrl_mean.len()
        )));
    }
    let all: Vec<usize> = (0..obs.cols()).collect();
    let genes = genes.unwrap_or(&all);
    if genes.len() < 2 {
        return Err(Error::InvalidArgument("ΔPearson needs at least 2 genes".into()));
    }
    let (mut sum, mut scored, mut skipped) = (0.0, 0, 0);
    let mut a = vec![0.0; genes.len()];
    let mut b = vec![0.0; genes.len()];
    for i in 0..obs.rows() {
        for (k, &g) in genes.iter().enumerate() {
            a[k] = pred.get(i, g) - ctrl_mean[g];
            b[k] = obs.get(i, g) - ctrl_mean[g];
        }
        let c = pearson(&a, &b)?;
        if c.degenerate {
            skipped += 1;
        } else {
            sum += c.value;
            scored += 1;
        }
    }
    Ok(DeltaPearson {
        value: if scored == 0 { f64::NAN } else { sum / scored as f64 },
        scored,
        skipped,
    })
}

/// Mean over genes of |Δ pred pseudobulk − Δ obs pseudobulk|; the control
/// mean cancels but is kept in the signature to mirror the definition.
pub fn mae_condition(pred: &Matrix<f64>, obs: &Matrix<f64>, ctrl_mean: &[f64]) -> Result<f64> {
    let (p, o) = (col_means(pred)?, col_means(obs)?);
    if p.len() != o.len() || o.len() != ctrl_mean.len() {
        return Err(Error::Dimension("gene counts differ".into()));
    }
    Ok(mean(
        &p.iter()
            .zip(&o)
            .zip(ctrl_mean)
            .map(|((a, b), c)| ((a - c) - (b - c)).abs())
            .collect::<Vec<_>>(),
    ))
}

/// Root mean squared pseudobulk error over genes.
pub fn rmse_condition(pred: &Matrix<f64>, obs: &Matrix<f64>) -> Result<f64> {
    let (p, o) = (col_means(pred)?, col_means(obs)?);
    if p.len() != o.len() {
        return Err(Error::Dimension("gene counts differ".into()));
    }
    Ok(mean(&p.iter().zip(&o).map(|(a, b)| (a - b).powi(2)).collect::<Vec<_>>()).sqrt())
}

/// ROC AUC from the rank-sum statistic; tied scores count ½.
pub fn auc_roc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Dimension("labels and scores differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Average precision: Σ (R_k − R_{k−1}) P_k over descending distinct score thresholds.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Dimension("labels and scores differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::InvalidArgument("AUPRC needs a positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Labels = top-`k` genes by |obs_u − ctrl|, scores = |pred_u − ctrl| (pseudobulks).
pub fn de_auc_auprc(obs_u: &[f64], obs_ctrl: &[f64], pred_u: &[f64], k: usize) -> Result<(f64, f64)> {
    let g = obs_u.len();
    if obs_ctrl.len() != g || pred_u.len() != g {
        return Err(Error::Dimension("pseudobulk lengths differ".into()));
    }
    if k == 0 || k >= g {
        return Err(Error::InvalidArgument(format!("K must satisfy 0 < K < {g}, got {k}")));
    }
    let delta: Vec<f64> = obs_u.iter().zip(obs_ctrl).map(|(a, b)| a - b).collect();
    let mut labels = vec![false; g];
    top_k_abs(&delta, k).into_iter().for_each(|i| labels[i] = true);
    let scores: Vec<f64> = pred_u.iter().zip(obs_ctrl).map(|(a, b)| (a - b).abs()).collect();
    Ok((auc_roc(&labels, &scores)?, auprc(&labels, &scores)?))
}

/// AUC and AUPRC against a fixed DE gene set instead of self-derived labels.
pub fn masked_auc_auprc(mask: &[bool], obs_ctrl: &[f64], pred_u: &[f64]) -> Result<(f64, f64)> {
    let scores: Vec<f64> = pred_u.iter().zip(obs_ctrl).map(|(a, b)| (a - b).abs()).collect();
    Ok((auc_roc(mask, &scores)?, auprc(mask, &scores)?))
}
