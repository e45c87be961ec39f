use serde::{Deserialize, Serialize};

use super::dataset::{SnapshotDataset, ValueMode};
use crate::error::{Error, Result};

pub const TARGET_LIBRARY_SIZE: f64 = 10_000.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizeReport {
    /// ids of cells dropped for having zero library size
    pub dropped: Vec<String>,
}

/// Library-size normalization to 10k counts followed by `log1p`.
pub fn normalize_counts(ds: &SnapshotDataset) -> Result<(SnapshotDataset, NormalizeReport)> {
    if ds.value_mode != ValueMode::Counts {
        return Err(Error::InvalidArgument("dataset is already normalized".into()));
    }
    let mut keep = Vec::new();
    let mut report = NormalizeReport::default();
    for i in 0..ds.n_cells() {
        if ds.expression.row(i).iter().sum::<f64>() > 0.0 {
            keep.push(i);
        } else {
            report.dropped.push(ds.cell_ids[i].clone());
        }
    }
    if keep.is_empty() {
        return Err(Error::InvalidArgument("every cell has zero library size".into()));
    }
    let mut out = ds.subset_cells(&keep);
    for i in 0..out.n_cells() {
        let row = out.expression.row_mut(i);
        let scale = TARGET_LIBRARY_SIZE / row.iter().sum::<f64>();
        row.iter_mut().for_each(|v| *v = (*v * scale).ln_1p());
    }
    out.value_mode = ValueMode::Normalized;
    Ok((out, report))
}

/// Per-gene variance over the masked cells (population form).
pub fn gene_variances(ds: &SnapshotDataset, train_mask: &[bool]) -> Result<Vec<f64>> {
    if train_mask.len() != ds.n_cells() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for {} cells",
            train_mask.len(),
            ds.n_cells()
        )));
    }
    let rows: Vec<usize> = (0..ds.n_cells()).filter(|&i| train_mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("training mask selects no cells".into()));
    }
    let g = ds.n_genes();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; g];
    for &i in &rows {
        for (m, v) in mean.iter_mut().zip(ds.expression.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; g];
    for &i in &rows {
        for ((s, v), m) in var.iter_mut().zip(ds.expression.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok(var)
}

/// Indices of the `k` most variable genes over training cells, returned in
/// ascending index order. Ties in variance go to the lower index.
pub fn select_hvg(ds: &SnapshotDataset, train_mask: &[bool], k: usize) -> Result<Vec<usize>> {
    if k > ds.n_genes() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {} genes",
            ds.n_genes()
        )));
    }
    let var = gene_variances(ds, train_mask)?;
    let mut order: Vec<usize> = (0..var.len()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::dataset::ConditionInfo;
    use crate::numcore::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(rows: Vec<Vec<f64>>) -> SnapshotDataset {
        let n = rows.len();
        let g = rows[0].len();
        SnapshotDataset {
            expression: Matrix::from_rows(&rows).unwrap(),
            cell_ids: (0..n).map(|i| format!("c{i}")).collect(),
            condition: vec![0; n],
            time: vec![0; n],
            genes: (0..g).map(|j| format!("g{j}")).collect(),
            conditions: vec![ConditionInfo {
                id: "ctrl".into(),
                targets: vec![],
                is_control: true,
            }],
            value_mode: ValueMode::Counts,
        }
    }

    #[test]
    fn two_gene_cell_hits_forced_value() {
        let (n, _) = normalize_counts(&counts(vec![vec![1.0, 1.0]])).unwrap();
        assert_eq!(n.expression.row(0), &[5000f64.ln_1p(), 5000f64.ln_1p()]);
        assert_eq!(n.value_mode, ValueMode::Normalized);
        assert!(normalize_counts(&n).is_err());
    }

    #[test]
    fn zero_cells_dropped_zero_genes_stay_zero() {
        let ds = counts(vec![vec![0.0, 0.0, 0.0], vec![0.0, 3.0, 1.0], vec![0.0, 2.0, 2.0]]);
        let (n, r) = normalize_counts(&ds).unwrap();
        assert_eq!(r.dropped, vec!["c0".to_string()]);
        assert_eq!(n.n_cells(), 2);
        assert!(n.expression.column(0).iter().all(|&v| v == 0.0));
        assert!(normalize_counts(&counts(vec![vec![0.0, 0.0]])).is_err());
    }

    #[test]
    fn library_sizes_are_ten_thousand_before_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..12).map(|_| rng.random_range(0..50) as f64 + 1.0).collect())
            .collect();
        let (n, _) = normalize_counts(&counts(rows)).unwrap();
        for i in 0..n.n_cells() {
            let s: f64 = n.expression.row(i).iter().map(|v| v.exp_m1()).sum();
            assert!((s - 10_000.0).abs() <= 1e-6, "{s}");
        }
    }

    #[test]
    fn hvg_edge_cases() {
        let mut ds = counts(vec![vec![1.0, 5.0, 2.0], vec![3.0, 5.0, 0.0], vec![2.0, 5.0, 7.0]]);
        ds.value_mode = ValueMode::Normalized;
        let all = vec![true; 3];
        assert_eq!(select_hvg(&ds, &all, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_hvg(&ds, &all, 2).unwrap(), vec![0, 2]);
        assert!(select_hvg(&ds, &[false; 3], 1).is_err());
        assert!(select_hvg(&ds, &all, 4).is_err());
        // equal variances: lower index wins
        let tied = counts(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]]);
        assert_eq!(select_hvg(&tied, &[true, true], 1).unwrap(), vec![0]);
    }

    #[test]
    fn hvg_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..30)
                .map(|_| (0..15).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let ds = counts(rows.clone());
            let mask: Vec<bool> = (0..30).map(|_| rng.random_bool(0.7)).collect();
            let k = rng.random_range(1..15);
            // oracle: sample variance via the two-pass textbook formula, rank by sorting pairs
            let kept: Vec<&Vec<f64>> = rows.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| r).collect();
            let mut scored: Vec<(f64, usize)> = (0..15)
                .map(|j| {
                    let col: Vec<f64> = kept.iter().map(|r| r[j]).collect();
                    let m = col.iter().sum::<f64>() / col.len() as f64;
                    (col.iter().map(|v| (v - m).powi(2)).sum::<f64>(), j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expect: Vec<usize> = scored[..k].iter().map(|s| s.1).collect();
            expect.sort_unstable();
            assert_eq!(select_hvg(&ds, &mask, k).unwrap(), expect);
        }
    }
}
