use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Whether expression holds raw counts or already-normalized values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMode {
    Counts,
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionInfo {
    pub id: String,
    /// names of the targeted genes or latent factors
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub is_control: bool,
}

/// Contents of `conditions.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionsManifest {
    pub value_mode: ValueMode,
    pub conditions: Vec<ConditionInfo>,
}

/// Unpaired expression snapshots indexed by (condition, time).
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotDataset {
    /// cells × genes
    pub expression: Matrix<f64>,
    pub cell_ids: Vec<String>,
    /// index into `conditions` per cell
    pub condition: Vec<usize>,
    pub time: Vec<usize>,
    pub genes: Vec<String>,
    pub conditions: Vec<ConditionInfo>,
    pub value_mode: ValueMode,
}

pub const SNAPSHOT_FILE: &str = "snapshot.csv";
pub const CONDITIONS_FILE: &str = "conditions.json";

impl SnapshotDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.expression.rows();
        if self.cell_ids.len() != n || self.condition.len() != n || self.time.len() != n {
            return Err(Error::Dimension("per-cell columns differ in length".into()));
        }
        if self.genes.len() != self.expression.cols() {
            return Err(Error::Dimension(format!(
                "{} gene names for {} expression columns",
                self.genes.len(),
                self.expression.cols()
            )));
        }
        let mut seen = HashSet::new();
        for g in &self.genes {
            if !seen.insert(g) {
                return Err(Error::InvalidArgument(format!("duplicate gene name `{g}`")));
            }
        }
        let mut ids = HashSet::new();
        for c in &self.conditions {
            if !ids.insert(&c.id) {
                return Err(Error::InvalidArgument(format!("duplicate condition id `{}`", c.id)));
            }
        }
        let controls = self.conditions.iter().filter(|c| c.is_control).count();
        if controls != 1 {
            return Err(Error::InvalidArgument(format!(
                "exactly one control condition required, found {controls}"
            )));
        }
        if let Some(i) = self.condition.iter().position(|&c| c >= self.conditions.len()) {
            return Err(Error::UnknownCondition(format!("row {i}")));
        }
        if !self.expression.is_finite() {
            return Err(Error::InvalidArgument("expression has non-finite values".into()));
        }
        if self.value_mode == ValueMode::Counts {
            if let Some(k) = self.expression.as_slice().iter().position(|&v| v < 0.0) {
                let (r, c) = (k / self.genes.len(), k % self.genes.len());
                return Err(Error::InvalidArgument(format!(
                    "negative count at cell `{}`, gene `{}`",
                    self.cell_ids[r], self.genes[c]
                )));
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.expression.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.expression.cols()
    }

    pub fn control_index(&self) -> usize {
        self.conditions.iter().position(|c| c.is_control).expect("validated")
    }

    pub fn control_id(&self) -> &str {
        &self.conditions[self.control_index()].id
    }

    pub fn condition_ids(&self) -> Vec<String> {
        self.conditions.iter().map(|c| c.id.clone()).collect()
    }

    pub fn condition_index(&self, id: &str) -> Result<usize> {
        self.conditions
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::UnknownCondition(id.to_string()))
    }

    /// Distinct time labels in ascending order.
    pub fn times(&self) -> Vec<usize> {
        self.time.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Row indices of the cells observed under `condition` at time label `time`.
    pub fn cells(&self, condition: usize, time: usize) -> Vec<usize> {
        (0..self.n_cells())
            .filter(|&i| self.condition[i] == condition && self.time[i] == time)
            .collect()
    }

    /// Lineage key of a cell whose id reads `{condition}_t{time}_{key}`;
    /// cells with the same key in different conditions or times descend
    /// from one trajectory.
    pub fn lineage_key(&self, row: usize) -> Option<&str> {
        let prefix = format!("{}_t{}_", self.conditions[self.condition[row]].id, self.time[row]);
        self.cell_ids[row].strip_prefix(prefix.as_str()).filter(|k| !k.is_empty())
    }

    /// Row indices grouped by (condition, time label).
    pub fn groups(&self) -> HashMap<(usize, usize), Vec<usize>> {
        let mut g: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for i in 0..self.n_cells() {
            g.entry((self.condition[i], self.time[i])).or_default().push(i);
        }
        g
    }

    /// Keeps the listed cells, in the given order.
    pub fn subset_cells(&self, rows: &[usize]) -> SnapshotDataset {
        SnapshotDataset {
            expression: self.expression.select_rows(rows),
            cell_ids: rows.iter().map(|&i| self.cell_ids[i].clone()).collect(),
            condition: rows.iter().map(|&i| self.condition[i]).collect(),
            time: rows.iter().map(|&i| self.time[i]).collect(),
            genes: self.genes.clone(),
            conditions: self.conditions.clone(),
            value_mode: self.value_mode,
        }
    }

    /// Keeps the listed genes, in the given order.
    pub fn subset_genes(&self, cols: &[usize]) -> SnapshotDataset {
        SnapshotDataset {
            expression: self.expression.select_cols(cols),
            genes: cols.iter().map(|&j| self.genes[j].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn manifest(&self) -> ConditionsManifest {
        ConditionsManifest {
            value_mode: self.value_mode,
            conditions: self.conditions.clone(),
        }
    }
}

/// Column means of the selected rows.
pub fn pseudobulk(x: &Matrix<f64>, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for &i in rows {
        for (a, v) in m.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    let n = rows.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn resolve(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(SNAPSHOT_FILE), path.join(CONDITIONS_FILE))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir.join(CONDITIONS_FILE))
    }
}

pub fn load_conditions(path: &Path) -> Result<ConditionsManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads `snapshot.csv` and its sibling `conditions.json`; `path` may name
/// either the CSV file or the directory holding both.
pub fn load_snapshot_table(path: &Path) -> Result<SnapshotDataset> {
    let (csv_path, manifest_path) = resolve(path);
    if !manifest_path.exists() {
        return Err(Error::format(&manifest_path, "missing conditions manifest"));
    }
    let manifest = load_conditions(&manifest_path)?;
    let index: HashMap<&str, usize> = manifest
        .conditions
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&csv_path)
        .map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::format(&csv_path, e.to_string()))?
        .clone();
    let fixed = ["cell_id", "condition", "time"];
    if header.len() < 3 || (0..3).any(|k| &header[k] != fixed[k]) {
        return Err(Error::format(&csv_path, "header must start with cell_id,condition,time"));
    }
    let genes: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
    let g = genes.len();
    let mut data = Vec::new();
    let (mut cell_ids, mut condition, mut time) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in reader.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::format(&csv_path, format!("line {line}: {e}")))?;
        if rec.len() != g + 3 {
            return Err(Error::format(
                &csv_path,
                format!("line {line}: {} fields, header has {}", rec.len(), g + 3),
            ));
        }
        let c = *index.get(&rec[1]).ok_or_else(|| {
            Error::UnknownCondition(format!("`{}` at line {line} ({})", &rec[1], csv_path.display()))
        })?;
        let t: usize = rec[2]
            .parse()
            .map_err(|_| Error::format(&csv_path, format!("line {line}: bad time `{}`", &rec[2])))?;
        cell_ids.push(rec[0].to_string());
        condition.push(c);
        time.push(t);
        for k in 0..g {
            let v: f64 = rec[k + 3].parse().map_err(|_| {
                Error::format(&csv_path, format!("line {line}: bad value `{}`", &rec[k + 3]))
            })?;
            data.push(v);
        }
    }
    let ds = SnapshotDataset {
        expression: Matrix::from_vec(cell_ids.len(), g, data)?,
        cell_ids,
        condition,
        time,
        genes,
        conditions: manifest.conditions,
        value_mode: manifest.value_mode,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `snapshot.csv` and `conditions.json` into `dir`.
pub fn save_snapshot_table(ds: &SnapshotDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(SNAPSHOT_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let mut header = vec!["cell_id".to_string(), "condition".into(), "time".into()];
    header.extend(ds.genes.iter().cloned());
    let wrap = |e: csv::Error| Error::format(&csv_path, e.to_string());
    w.write_record(&header).map_err(wrap)?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..ds.n_cells() {
        rec.clear();
        rec.push(ds.cell_ids[i].clone());
        rec.push(ds.conditions[ds.condition[i]].id.clone());
        rec.push(ds.time[i].to_string());
        // Display prints the shortest string that parses back to the same f64
        rec.extend(ds.expression.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let mpath = dir.join(CONDITIONS_FILE);
    let text = serde_json::to_string_pretty(&ds.manifest())?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}
