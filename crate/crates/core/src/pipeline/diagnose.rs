use serde::{Deserialize, Serialize};

use crate::dataio::SnapshotDataset;
use crate::error::{Error, Result};
use crate::evalsuite::mean;
use crate::genmodel::{transition_score_diff, LatentState, ModelParams, TransitionLaw};
use crate::numcore::Matrix;

use super::predict::encode_means;

/// Consecutive latent states of one environment, paired by row.
#[derive(Clone, Debug)]
pub struct StatePairs {
    pub condition: String,
    pub z_prev: Matrix<f64>,
    pub z_curr: Matrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvDiagnosis {
    pub condition: String,
    pub n_samples: usize,
    pub iota_norm_mean: f64,
    pub iota_norm_max: f64,
    pub nu_norm_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub baseline: String,
    pub environments: Vec<EnvDiagnosis>,
    pub iota_norm_mean: f64,
    pub nu_norm_mean: f64,
    /// mean‖d_ι‖ / mean‖d_ν‖ over every environment and sample
    pub ratio: f64,
    pub iota_norm_max: f64,
}

/// Score-difference block norms of every non-baseline environment.
pub fn score_block_report<L: TransitionLaw + ?Sized>(
    law: &L,
    samples: &[StatePairs],
    baseline: &str,
) -> Result<DiagnoseReport> {
    let di = law.d_iota();
    let mut envs = Vec::new();
    let (mut all_i, mut all_n) = (Vec::new(), Vec::new());
    for s in samples.iter().filter(|s| s.condition != baseline) {
        if s.z_prev.shape() != s.z_curr.shape() {
            return Err(Error::Dimension(format!("{}: state pairs differ in shape", s.condition)));
        }
        let (mut ni, mut nn) = (Vec::new(), Vec::new());
        for r in 0..s.z_prev.rows() {
            let d = transition_score_diff(
                law,
                &LatentState::split(s.z_curr.row(r), di),
                &LatentState::split(s.z_prev.row(r), di),
                &s.condition,
                baseline,
            )?;
            ni.push(d.iota_norm());
            nn.push(d.nu_norm());
        }
        if ni.is_empty() {
            continue;
        }
        envs.push(EnvDiagnosis {
            condition: s.condition.clone(),
            n_samples: ni.len(),
            iota_norm_mean: mean(&ni),
            iota_norm_max: ni.iter().copied().fold(0.0, f64::max),
            nu_norm_mean: mean(&nn),
        });
        all_i.extend(ni);
        all_n.extend(nn);
    }
    if envs.is_empty() {
        return Err(Error::InvalidArgument(
            "diagnosis needs at least one non-baseline environment with samples".into(),
        ));
    }
    let (mi, mn) = (mean(&all_i), mean(&all_n));
    Ok(DiagnoseReport {
        baseline: baseline.to_string(),
        environments: envs,
        iota_norm_mean: mi,
        nu_norm_mean: mn,
        ratio: if mn > 0.0 { mi / mn } else { f64::NAN },
        iota_norm_max: all_i.iter().copied().fold(0.0, f64::max),
    })
}

/// Row pairs `(t−1, t)` per non-baseline condition, taken from `latents`
/// (one row per dataset cell). Rows of the two snapshots are paired by
/// index, which is arbitrary for unpaired data; the score difference only
/// needs states, not trajectories. At most `per_env` pairs per condition.
pub fn state_pairs_from_latents(ds: &SnapshotDataset, latents: &Matrix<f64>, per_env: usize) -> Result<Vec<StatePairs>> {
    if latents.rows() != ds.n_cells() {
        return Err(Error::Dimension(format!(
            "{} latent rows for {} cells",
            latents.rows(),
            ds.n_cells()
        )));
    }
    let times = ds.times();
    let ctrl = ds.control_index();
    let mut out = Vec::new();
    for (c, info) in ds.conditions.iter().enumerate() {
        if c == ctrl {
            continue;
        }
        let (mut prev, mut curr) = (Vec::new(), Vec::new());
        for w in times.windows(2) {
            let a = ds.cells(c, w[0]);
            let b = ds.cells(c, w[1]);
            for (i, j) in a.iter().zip(&b) {
                prev.push(*i);
                curr.push(*j);
            }
        }
        let n = prev.len().min(per_env);
        // spread the subsample evenly over the available pairs
        let pick: Vec<usize> = (0..n).map(|k| k * prev.len() / n.max(1)).collect();
        let pi: Vec<usize> = pick.iter().map(|&k| prev[k]).collect();
        let ci: Vec<usize> = pick.iter().map(|&k| curr[k]).collect();
        out.push(StatePairs {
            condition: info.id.clone(),
            z_prev: latents.select_rows(&pi),
            z_curr: latents.select_rows(&ci),
        });
    }
    Ok(out)
}

/// Encodes every cell with the model's posterior mean under its own condition.
pub fn encoded_latents(params: &ModelParams, ds: &SnapshotDataset) -> Result<Matrix<f64>> {
    let mut z = Matrix::zeros(ds.n_cells(), params.config.d_latent());
    for ((c, t), rows) in sorted_groups(ds) {
        let id = &ds.conditions[c].id;
        // unseen conditions are encoded with the control embedding
        let emb = if params.config.condition_index(id).is_ok() {
            id.as_str()
        } else {
            ds.control_id()
        };
        let t = t.min(params.config.horizon);
        let m = encode_means(params, &ds.expression.select_rows(&rows), emb, t)?;
        for (k, &r) in rows.iter().enumerate() {
            z.row_mut(r).copy_from_slice(m.row(k));
        }
    }
    Ok(z)
}

fn sorted_groups(ds: &SnapshotDataset) -> Vec<((usize, usize), Vec<usize>)> {
    let mut g: Vec<_> = ds.groups().into_iter().collect();
    g.sort_by_key(|(k, _)| *k);
    g
}

/// Diagnoses a trained model on a dataset's encoded cells.
pub fn diagnose_model(params: &ModelParams, ds: &SnapshotDataset, per_env: usize) -> Result<DiagnoseReport> {
    if ds.conditions.len() < 2 {
        return Err(Error::InvalidArgument("diagnosis needs at least two environments".into()));
    }
    let z = encoded_latents(params, ds)?;
    let pairs: Vec<StatePairs> = state_pairs_from_latents(ds, &z, per_env)?
        .into_iter()
        .filter(|p| params.config.condition_index(&p.condition).is_ok())
        .collect();
    score_block_report(params, &pairs, ds.control_id())
}
