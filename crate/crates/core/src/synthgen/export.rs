use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generator::{check_rank_condition, EnvKind, Generator, RankCheck, SynthConfig};
use super::sample::TrajectoryBundle;
use crate::dataio::{save_snapshot_table, ConditionInfo, SnapshotDataset, ValueMode};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATENTS_DIR: &str = "latents_truth";

/// Ground-truth record written next to a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub rank: RankCheck,
    pub generator: Generator,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub n_cells: usize,
    pub n_conditions: usize,
    pub rank: RankCheck,
}

fn cell_id(cond: &str, t: usize, i: usize) -> String {
    format!("{cond}_t{t}_{i}")
}

/// Flattens a bundle into a snapshot dataset: every environment, every t,
/// rows in sample order. Gene names are `gene_1..gene_p`.
pub fn bundle_to_dataset(gen: &Generator, bundle: &TrajectoryBundle) -> Result<SnapshotDataset> {
    let conditions: Vec<ConditionInfo> = gen
        .bank
        .environments
        .iter()
        .map(|e| ConditionInfo {
            id: e.id.clone(),
            targets: e.target_names(),
            is_control: e.kind == EnvKind::Baseline,
        })
        .collect();
    let mut parts = Vec::new();
    let (mut cell_ids, mut condition, mut time) = (Vec::new(), Vec::new(), Vec::new());
    for env in &bundle.envs {
        let c = conditions
            .iter()
            .position(|ci| ci.id == env.condition)
            .ok_or_else(|| Error::UnknownCondition(env.condition.clone()))?;
        for (t, x) in env.observations.iter().enumerate() {
            for i in 0..x.rows() {
                cell_ids.push(cell_id(&env.condition, t, i));
                condition.push(c);
                time.push(t);
            }
            parts.push(x);
        }
    }
    let ds = SnapshotDataset {
        expression: Matrix::vcat(&parts)?,
        cell_ids,
        condition,
        time,
        genes: (1..=gen.spec.p).map(|g| format!("gene_{g}")).collect(),
        conditions,
        value_mode: ValueMode::Normalized,
    };
    ds.validate()?;
    Ok(ds)
}

fn latent_header(d_iota: usize, d_nu: usize) -> Vec<String> {
    let mut h = vec!["cell_id".to_string()];
    h.extend((1..=d_iota).map(|k| format!("z_iota_{k}")));
    h.extend((1..=d_nu).map(|k| format!("z_nu_{k}")));
    h
}

/// Writes snapshot.csv, conditions.json, latents_truth/{cond}_t{t}.csv and manifest.json.
pub fn export_dataset(
    gen: &Generator,
    bundle: &TrajectoryBundle,
    config: &SynthConfig,
    dir: &Path,
) -> Result<ExportSummary> {
    let ds = bundle_to_dataset(gen, bundle)?;
    save_snapshot_table(&ds, dir)?;
    let ldir = dir.join(LATENTS_DIR);
    std::fs::create_dir_all(&ldir).map_err(|e| Error::io(&ldir, e))?;
    let header = latent_header(gen.spec.d_iota, gen.spec.d_nu);
    for env in &bundle.envs {
        for (t, z) in env.latents.iter().enumerate() {
            let path = ldir.join(format!("{}_t{t}.csv", env.condition));
            let wrap = |e: csv::Error| Error::format(&path, e.to_string());
            let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
            w.write_record(&header).map_err(wrap)?;
            for i in 0..z.rows() {
                let mut rec = vec![cell_id(&env.condition, t, i)];
                rec.extend(z.row(i).iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(wrap)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }
    let rank = check_rank_condition(&gen.bank)?;
    let manifest = Manifest {
        config: config.clone(),
        seed: bundle.seed,
        rank,
        generator: gen.clone(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(ExportSummary {
        dir: dir.to_path_buf(),
        n_cells: ds.n_cells(),
        n_conditions: ds.conditions.len(),
        rank,
    })
}

/// Ground-truth latents aligned to the cells of `ds`, read from
/// `dir/latents_truth`. `Ok(None)` when the directory is absent.
pub fn load_latents_truth(dir: &Path, ds: &SnapshotDataset) -> Result<Option<Matrix<f64>>> {
    let ldir = if dir.is_dir() { dir.to_path_buf() } else { dir.parent().map(Path::to_path_buf).unwrap_or_default() }
        .join(LATENTS_DIR);
    if !ldir.is_dir() {
        return Ok(None);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&ldir)
        .map_err(|e| Error::io(&ldir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    let mut width = None;
    for path in entries {
        let wrap = |e: csv::Error| Error::format(&path, e.to_string());
        let mut r = csv::Reader::from_path(&path).map_err(wrap)?;
        let w = r.headers().map_err(wrap)?.len() - 1;
        if *width.get_or_insert(w) != w {
            return Err(Error::format(&path, "latent width differs between files"));
        }
        for rec in r.records() {
            let rec = rec.map_err(wrap)?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(&path, e.to_string()))?;
            rows.insert(rec[0].to_string(), vals);
        }
    }
    let Some(w) = width else { return Ok(None) };
    let mut m = Matrix::zeros(ds.n_cells(), w);
    for (i, id) in ds.cell_ids.iter().enumerate() {
        let row = rows
            .get(id)
            .ok_or_else(|| Error::format(&ldir, format!("no latent row for cell `{id}`")))?;
        m.row_mut(i).copy_from_slice(row);
    }
    Ok(Some(m))
}
