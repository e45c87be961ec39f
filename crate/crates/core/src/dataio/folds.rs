use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dataset::{pseudobulk, SnapshotDataset};
use super::preprocess::select_hvg;
use crate::error::{Error, Result};

/// One leave-one-intervention-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub held_out: String,
    /// control first, then the remaining perturbations in manifest order
    pub train_conditions: Vec<String>,
    /// gene indices (ascending) chosen from training cells
    pub genes: Vec<usize>,
    /// indices into the full gene list; a subset of `genes`
    pub de_genes: Vec<usize>,
    /// DE top-count actually used (requested K clamped below the gene count)
    pub k_de: usize,
}

impl FoldSpec {
    pub fn train_mask(&self, ds: &SnapshotDataset) -> Vec<bool> {
        let keep: BTreeSet<usize> = self
            .train_conditions
            .iter()
            .filter_map(|c| ds.condition_index(c).ok())
            .collect();
        ds.condition.iter().map(|c| keep.contains(c)).collect()
    }
}

/// Indices of the `k` largest `|values|`; ties go to the lower index.
pub fn top_k_abs(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Largest usable DE top-count for `g` genes.
pub fn clamp_k(k: usize, g: usize) -> usize {
    k.min(g.saturating_sub(1)).max(1)
}

/// Union over training (u, t) of the top-`k` genes by |pseudobulk(u,t) − pseudobulk(ctrl,t)|,
/// restricted to `genes`. Returned as full-gene indices in ascending order.
pub fn de_mask(ds: &SnapshotDataset, train_conditions: &[usize], genes: &[usize], k: usize) -> Vec<usize> {
    let ctrl = ds.control_index();
    let groups = ds.groups();
    let mut union = BTreeSet::new();
    for t in ds.times() {
        let Some(ctrl_rows) = groups.get(&(ctrl, t)) else { continue };
        let base = pseudobulk(&ds.expression, ctrl_rows);
        for &c in train_conditions {
            if c == ctrl {
                continue;
            }
            let Some(rows) = groups.get(&(c, t)) else { continue };
            let pb = pseudobulk(&ds.expression, rows);
            let shift: Vec<f64> = genes.iter().map(|&g| pb[g] - base[g]).collect();
            union.extend(top_k_abs(&shift, k).into_iter().map(|i| genes[i]));
        }
    }
    union.into_iter().collect()
}

/// One fold per non-control condition. `n_hvg` of `None` keeps every gene.
pub fn build_loo_folds(ds: &SnapshotDataset, n_hvg: Option<usize>, k: usize) -> Result<Vec<FoldSpec>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be ≥ 1".into()));
    }
    let ctrl = ds.control_index();
    let perturbations: Vec<usize> = (0..ds.conditions.len()).filter(|&c| c != ctrl).collect();
    if perturbations.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs ≥ 2 perturbations, found {}",
            perturbations.len()
        )));
    }
    let mut folds = Vec::with_capacity(perturbations.len());
    for &held in &perturbations {
        let mut train = vec![ctrl];
        train.extend(perturbations.iter().copied().filter(|&c| c != held));
        let mask: Vec<bool> = ds.condition.iter().map(|&c| c != held).collect();
        let n_genes = n_hvg.map_or(ds.n_genes(), |h| h.min(ds.n_genes()));
        let genes = select_hvg(ds, &mask, n_genes)?;
        let k_de = clamp_k(k, genes.len());
        folds.push(FoldSpec {
            held_out: ds.conditions[held].id.clone(),
            train_conditions: train.iter().map(|&c| ds.conditions[c].id.clone()).collect(),
            de_genes: de_mask(ds, &train, &genes, k_de),
            genes,
            k_de,
        });
    }
    Ok(folds)
}
