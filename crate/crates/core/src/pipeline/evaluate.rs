use serde::{Deserialize, Serialize};

use crate::dataio::{pseudobulk, FoldSpec, SnapshotDataset};
use crate::error::{Error, Result};
use crate::evalsuite::{
    fold_report, linear_block_fit, mcc_nu, perturb_metrics, probe_grounding, ConditionPrediction, FoldReport,
    PerturbMetrics, ProbeConfig, ProbeReport, RecoveryReport,
};
use crate::genmodel::ModelParams;
use crate::numcore::Matrix;

use super::diagnose::encoded_latents;
use super::predict::{predict_cells, resolve_embedding, EmbeddingChoice};

/// Test groups of one fold plus the embedding that produced them.
#[derive(Clone, Debug)]
pub struct FoldGroups {
    pub groups: Vec<ConditionPrediction>,
    pub embedding: Option<EmbeddingChoice>,
}

fn ordinal(ds: &SnapshotDataset, label: usize) -> usize {
    ds.times().iter().position(|&t| t == label).expect("label comes from the dataset")
}

/// Columns of `ds` named by `fold.genes`, and the fold DE mask re-indexed
/// into those columns.
fn fold_view(ds: &SnapshotDataset, fold: &FoldSpec) -> (SnapshotDataset, Vec<usize>) {
    let view = ds.subset_genes(&fold.genes);
    let de = fold
        .de_genes
        .iter()
        .filter_map(|g| fold.genes.iter().position(|x| x == g))
        .collect();
    (view, de)
}

/// Repeats the rows of `m` cyclically (or truncates) to `n` rows.
fn match_rows(m: &Matrix<f64>, n: usize) -> Matrix<f64> {
    let idx: Vec<usize> = (0..n).map(|i| i % m.rows().max(1)).collect();
    m.select_rows(&idx)
}

/// Rolls the held-out condition forward from its earliest snapshot and
/// pairs every later observed snapshot with as many predicted cells.
pub fn model_fold_groups(ds: &SnapshotDataset, fold: &FoldSpec, params: &ModelParams, seed: u64) -> Result<FoldGroups> {
    let (view, _) = fold_view(ds, fold);
    if params.config.p != view.n_genes() {
        return Err(Error::Dimension(format!(
            "model expects {} genes, fold `{}` has {}",
            params.config.p,
            fold.held_out,
            view.n_genes()
        )));
    }
    let h = view.condition_index(&fold.held_out)?;
    let ctrl = view.control_index();
    let choice = resolve_embedding(&params.config.conditions, &view.conditions, &fold.held_out, None)?;
    let times = view.times();
    let observed: Vec<usize> = times.iter().copied().filter(|&t| !view.cells(h, t).is_empty()).collect();
    let Some((&t0, later)) = observed.split_first() else {
        return Err(Error::InvalidArgument(format!("no cells for `{}`", fold.held_out)));
    };
    if later.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "`{}` is observed at a single time; nothing to predict",
            fold.held_out
        )));
    }
    let start = ordinal(&view, t0);
    let last = ordinal(&view, *later.last().unwrap());
    let x0 = view.expression.select_rows(&view.cells(h, t0));
    let rollout = predict_cells(params, &x0, start.min(params.config.horizon), &choice.used, last - start, seed)?;
    let mut groups = Vec::with_capacity(later.len());
    for &t in later {
        let obs_rows = view.cells(h, t);
        let pred = &rollout[ordinal(&view, t) - start - 1];
        groups.push(ConditionPrediction {
            condition: fold.held_out.clone(),
            time: t,
            pred: match_rows(pred, obs_rows.len()),
            obs: view.expression.select_rows(&obs_rows),
            ctrl_mean: pseudobulk(&view.expression, &view.cells(ctrl, t)),
        });
    }
    Ok(FoldGroups {
        groups,
        embedding: Some(choice),
    })
}

/// Test groups of one fold from a predictions table (same format as the
/// observed table, genes matched by name).
pub fn table_fold_groups(ds: &SnapshotDataset, fold: &FoldSpec, preds: &SnapshotDataset) -> Result<FoldGroups> {
    let (view, _) = fold_view(ds, fold);
    let cols = view
        .genes
        .iter()
        .map(|g| {
            preds
                .genes
                .iter()
                .position(|x| x == g)
                .ok_or_else(|| Error::format("predictions", format!("missing gene `{g}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let h = view.condition_index(&fold.held_out)?;
    let ctrl = view.control_index();
    let ph = preds.condition_index(&fold.held_out).map_err(|_| {
        Error::format("predictions", format!("missing held-out condition `{}`", fold.held_out))
    })?;
    let mut groups = Vec::new();
    for t in view.times() {
        let obs_rows = view.cells(h, t);
        let pred_rows = preds.cells(ph, t);
        if obs_rows.is_empty() || pred_rows.is_empty() {
            continue;
        }
        groups.push(ConditionPrediction {
            condition: fold.held_out.clone(),
            time: t,
            pred: preds.expression.select_rows(&pred_rows).select_cols(&cols),
            obs: view.expression.select_rows(&obs_rows),
            ctrl_mean: pseudobulk(&view.expression, &view.cells(ctrl, t)),
        });
    }
    if groups.is_empty() {
        return Err(Error::format(
            "predictions",
            format!("no snapshot of `{}` is present in both predictions and data", fold.held_out),
        ));
    }
    Ok(FoldGroups {
        groups,
        embedding: None,
    })
}

/// Scores every fold, then the union of all folds' test groups. The pooled
/// summary uses no DE mask since each fold has its own.
pub fn evaluate_folds(
    ds: &SnapshotDataset,
    folds: &[FoldSpec],
    k: usize,
    mut groups_for: impl FnMut(&FoldSpec) -> Result<FoldGroups>,
) -> Result<(Vec<FoldReport>, Option<PerturbMetrics>)> {
    let mut reports = Vec::with_capacity(folds.len());
    let mut pooled: Vec<ConditionPrediction> = Vec::new();
    let mut same_genes = true;
    for fold in folds {
        let fg = groups_for(fold)?;
        let (_, de) = fold_view(ds, fold);
        let fallback = fg.embedding.filter(|e| e.fallback).map(|e| e.used);
        reports.push(fold_report(&fold.held_out, &fg.groups, k, Some(&de), fallback)?);
        same_genes &= fold.genes == folds[0].genes;
        pooled.extend(fg.groups);
    }
    let pooled = if same_genes && !pooled.is_empty() {
        Some(perturb_metrics(&pooled, k, None)?)
    } else {
        None
    };
    Ok((reports, pooled))
}

/// Where recovery metrics come from, for reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub recovery: RecoveryReport,
    pub probe: ProbeReport,
    pub n_cells: usize,
}

/// Evenly spaced row subsample of size `min(n, max)`.
pub fn spread_rows(n: usize, max: usize) -> Vec<usize> {
    let m = n.min(max);
    (0..m).map(|k| k * n / m.max(1)).collect()
}

/// Encodes every cell, then scores the ν block by MCC, the ι block by a
/// linear fit and the full latent by the probe. At most `max_rows` cells
/// are used.
pub fn recovery_metrics(
    params: &ModelParams,
    ds: &SnapshotDataset,
    truth: &Matrix<f64>,
    seed: u64,
    probe: &ProbeConfig,
    max_rows: usize,
) -> Result<RecoveryOutcome> {
    let cfg = &params.config;
    if truth.rows() != ds.n_cells() || truth.cols() != cfg.d_latent() {
        return Err(Error::Dimension(format!(
            "truth is {}×{}, expected {}×{}",
            truth.rows(),
            truth.cols(),
            ds.n_cells(),
            cfg.d_latent()
        )));
    }
    if cfg.p != ds.n_genes() {
        return Err(Error::Dimension(format!(
            "model expects {} genes, data has {}",
            cfg.p,
            ds.n_genes()
        )));
    }
    let rows = spread_rows(ds.n_cells(), max_rows);
    let sub = ds.subset_cells(&rows);
    let z_hat = encoded_latents(params, &sub)?;
    let z = truth.select_rows(&rows);
    let di = cfg.d_iota;
    let iota: Vec<usize> = (0..di).collect();
    let nu: Vec<usize> = (di..cfg.d_latent()).collect();
    let m = mcc_nu(&z_hat.select_cols(&nu), &z.select_cols(&nu))?;
    let lin = linear_block_fit(&z_hat.select_cols(&iota), &z.select_cols(&iota), seed)?;
    let probe = probe_grounding(&z_hat, &z, seed, probe)?;
    Ok(RecoveryOutcome {
        recovery: RecoveryReport {
            mcc_nu: m.mcc,
            assignment: m.assignment,
            linear_r2_iota: lin.r2,
            linear_degenerate: lin.degenerate,
            degenerate_columns: m.degenerate,
        },
        probe,
        n_cells: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::build_loo_folds;
    use crate::genmodel::ModelConfig;
    use crate::synthgen::{bundle_to_dataset, make_generator, sample_trajectories, SynthConfig};

    fn data() -> SnapshotDataset {
        let cfg = SynthConfig {
            n_cells: 12,
            horizon: 2,
            ..SynthConfig::default()
        };
        let gen = make_generator(&cfg).unwrap();
        let b = sample_trajectories(&gen, 12, 2, 4, true).unwrap();
        bundle_to_dataset(&gen, &b).unwrap()
    }

    #[test]
    fn passthrough_table_scores_perfectly() {
        let ds = data();
        let folds = build_loo_folds(&ds, None, 5).unwrap();
        let (reports, pooled) = evaluate_folds(&ds, &folds, 5, |f| table_fold_groups(&ds, f, &ds)).unwrap();
        assert_eq!(reports.len(), ds.conditions.len() - 1);
        for r in &reports {
            assert_eq!(r.metrics.pseudobulk_r2, Some(1.0));
            assert_eq!(r.metrics.mae, 0.0);
            assert!((r.metrics.delta_pearson - 1.0).abs() < 1e-12);
            assert_eq!(r.metrics.auc_roc, 1.0);
        }
        assert_eq!(pooled.unwrap().rmse, 0.0);
    }

    #[test]
    fn model_folds_predict_every_later_time() {
        let ds = data();
        let folds = build_loo_folds(&ds, None, 5).unwrap();
        let params = ModelParams::init(
            ModelConfig {
                d_iota: 2,
                d_nu: 3,
                p: ds.n_genes(),
                d_u: 2,
                hidden: 6,
                horizon: 2,
                conditions: folds[0].train_conditions.clone(),
            },
            0,
        )
        .unwrap();
        let fg = model_fold_groups(&ds, &folds[0], &params, 3).unwrap();
        assert_eq!(fg.groups.len(), 2);
        assert!(fg.embedding.as_ref().unwrap().fallback);
        for g in &fg.groups {
            assert_eq!(g.pred.shape(), g.obs.shape());
            assert!(g.pred.is_finite());
        }
        let again = model_fold_groups(&ds, &folds[0], &params, 3).unwrap();
        assert_eq!(again.groups[1].pred, fg.groups[1].pred);
    }

    #[test]
    fn spread_rows_is_even_and_bounded() {
        assert_eq!(spread_rows(10, 4), vec![0, 2, 5, 7]);
        assert_eq!(spread_rows(3, 10), vec![0, 1, 2]);
    }
}
