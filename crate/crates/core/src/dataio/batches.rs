use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SnapshotDataset;
use super::folds::FoldSpec;
use crate::coupling::{
    default_epsilon, independent_coupling, key_matches, sample_plan, sinkhorn, squared_euclidean_cost, CouplingMethod,
    CouplingPlan, SinkhornConfig,
};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::objective::{AlignBatch, PairBatch};

/// Batches consumed by one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub pair: PairBatch,
    pub align: Option<AlignBatch>,
}

/// A (condition, time) transition dropped because a snapshot is missing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub condition: String,
    /// time label of the later snapshot
    pub time: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub temporal: CouplingMethod,
    pub align: CouplingMethod,
    pub sinkhorn: SinkhornConfig,
    /// cells per side entering each transport problem
    pub ot_subsample: usize,
}

/// Population pairing reused across epochs: either uniform, or a fixed
/// transport plan over subsampled cells.
#[derive(Clone, Debug)]
enum Pairing {
    Independent,
    Transport {
        src_rows: Vec<usize>,
        dst_rows: Vec<usize>,
        plan: Matrix<f64>,
    },
    /// every key-matched (src, dst) row pair
    Matched { src: Vec<usize>, dst: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Transition {
    condition: usize,
    /// ordinal time index of the later snapshot
    t: usize,
    temporal: Pairing,
    align: Option<Pairing>,
}

/// Per-(condition, time) cell matrices plus cached couplings.
#[derive(Clone, Debug)]
pub struct BatchPlanner {
    config: BatchConfig,
    condition_ids: Vec<String>,
    control: usize,
    /// cells[c][t] = expression of condition c at ordinal time t (None when absent)
    cells: Vec<Vec<Option<Matrix<f64>>>>,
    transitions: Vec<Transition>,
    pub skipped: Vec<SkippedPair>,
    /// matched couplings that found no shared lineage key and fell back to
    /// independent pairing: (kind, condition, time label)
    pub unmatched: Vec<(String, String, usize)>,
    pub time_labels: Vec<usize>,
}

/// Decorrelated child seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).rotate_left(31);
        // splitmix64 finalizer
        h ^= h >> 30;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn transport(
    src: &Matrix<f64>,
    dst: &Matrix<f64>,
    config: &BatchConfig,
    seed: u64,
) -> Result<Pairing> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize| -> Vec<usize> {
        let mut v = index::sample(&mut rng, n, config.ot_subsample.min(n)).into_vec();
        v.sort_unstable();
        v
    };
    let (src_rows, dst_rows) = (pick(src.rows()), pick(dst.rows()));
    let cost = squared_euclidean_cost(&src.select_rows(&src_rows), &dst.select_rows(&dst_rows))?;
    let eps = config.sinkhorn.epsilon.unwrap_or_else(|| default_epsilon(&cost));
    let res = sinkhorn(&cost, eps, config.sinkhorn.max_iters, config.sinkhorn.tol)?;
    Ok(Pairing::Transport {
        src_rows,
        dst_rows,
        plan: res.plan,
    })
}

fn matched(src_keys: &[Option<String>], dst_keys: &[Option<String>]) -> Pairing {
    let (src, dst) = key_matches(src_keys, dst_keys);
    // unkeyed cells never match
    let keep: Vec<usize> = (0..src.len()).filter(|&k| src_keys[src[k]].is_some()).collect();
    if keep.is_empty() {
        return Pairing::Independent;
    }
    Pairing::Matched {
        src: keep.iter().map(|&k| src[k]).collect(),
        dst: keep.iter().map(|&k| dst[k]).collect(),
    }
}

fn draw(pairing: &Pairing, n_src: usize, n_dst: usize, n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    match pairing {
        Pairing::Independent => {
            let p = independent_coupling(n_src, n_dst, n, seed)?;
            Ok((p.src, p.dst))
        }
        Pairing::Transport {
            src_rows,
            dst_rows,
            plan,
        } => {
            let p: CouplingPlan = sample_plan(plan, n, seed)?;
            Ok((
                p.src.iter().map(|&i| src_rows[i]).collect(),
                p.dst.iter().map(|&j| dst_rows[j]).collect(),
            ))
        }
        Pairing::Matched { src, dst } => {
            let p = independent_coupling(src.len(), 1, n, seed)?;
            Ok((p.src.iter().map(|&k| src[k]).collect(), p.src.iter().map(|&k| dst[k]).collect()))
        }
    }
}

impl BatchPlanner {
    /// Groups the cells of `ds` (restricted to `conditions`) and builds the couplings.
    pub fn new(ds: &SnapshotDataset, conditions: &[String], config: BatchConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if config.ot_subsample == 0 {
            return Err(Error::InvalidArgument("ot_subsample must be ≥ 1".into()));
        }
        let time_labels = ds.times();
        let groups = ds.groups();
        let control_global = ds.control_index();
        let mut condition_ids = Vec::new();
        let mut cells = Vec::new();
        let mut keys: Vec<Vec<Vec<Option<String>>>> = Vec::new();
        let mut control = None;
        for id in conditions {
            let c = ds.condition_index(id)?;
            if c == control_global {
                control = Some(condition_ids.len());
            }
            condition_ids.push(id.clone());
            cells.push(
                time_labels
                    .iter()
                    .map(|&t| groups.get(&(c, t)).map(|rows| ds.expression.select_rows(rows)))
                    .collect::<Vec<_>>(),
            );
            keys.push(
                time_labels
                    .iter()
                    .map(|&t| {
                        groups
                            .get(&(c, t))
                            .map(|rows| rows.iter().map(|&r| ds.lineage_key(r).map(str::to_string)).collect())
                            .unwrap_or_default()
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let control = control.ok_or_else(|| Error::InvalidArgument("training set lacks the control".into()))?;
        let mut transitions = Vec::new();
        let mut skipped = Vec::new();
        let mut unmatched = Vec::new();
        let mut note = |kind: &str, c: usize, t: usize, p: Pairing| {
            if matches!(p, Pairing::Independent) {
                unmatched.push((kind.to_string(), condition_ids[c].clone(), time_labels[t]));
            }
            p
        };
        for (c, per_t) in cells.iter().enumerate() {
            for t in 1..time_labels.len() {
                let (Some(prev), Some(curr)) = (&per_t[t - 1], &per_t[t]) else {
                    skipped.push(SkippedPair {
                        condition: condition_ids[c].clone(),
                        time: time_labels[t],
                    });
                    continue;
                };
                let temporal = match config.temporal {
                    CouplingMethod::Independent => Pairing::Independent,
                    CouplingMethod::Sinkhorn => {
                        transport(prev, curr, &config, derive_seed(seed, &[1, c as u64, t as u64]))?
                    }
                    CouplingMethod::Matched => note("temporal", c, t, matched(&keys[c][t - 1], &keys[c][t])),
                };
                let align = match (&cells[control][t], c == control) {
                    (Some(ctrl), false) => Some(match config.align {
                        CouplingMethod::Independent => Pairing::Independent,
                        CouplingMethod::Sinkhorn => {
                            transport(curr, ctrl, &config, derive_seed(seed, &[2, c as u64, t as u64]))?
                        }
                        CouplingMethod::Matched => note("align", c, t, matched(&keys[c][t], &keys[control][t])),
                    }),
                    _ => None,
                };
                transitions.push(Transition {
                    condition: c,
                    t,
                    temporal,
                    align,
                });
            }
        }
        if transitions.is_empty() {
            return Err(Error::InvalidArgument("no condition has two consecutive snapshots".into()));
        }
        Ok(BatchPlanner {
            config,
            condition_ids,
            control,
            cells,
            transitions,
            skipped,
            unmatched,
            time_labels,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.transitions.len()
    }

    pub fn control_id(&self) -> &str {
        &self.condition_ids[self.control]
    }

    /// One batch per (condition, t−1 → t) transition, in a seeded random order.
    pub fn epoch(&self, seed: u64) -> Result<Vec<StepBatch>> {
        let mut order: Vec<usize> = (0..self.transitions.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])));
        let b = self.config.batch_size;
        let mut out = Vec::with_capacity(order.len());
        for k in order {
            let tr = &self.transitions[k];
            let per_t = &self.cells[tr.condition];
            let prev = per_t[tr.t - 1].as_ref().expect("transition built from present snapshots");
            let curr = per_t[tr.t].as_ref().expect("transition built from present snapshots");
            let s = derive_seed(seed, &[3, k as u64]);
            let (si, di) = draw(&tr.temporal, prev.rows(), curr.rows(), b, s)?;
            let pair = PairBatch {
                x_prev: prev.select_rows(&si),
                x_curr: curr.select_rows(&di),
                condition: self.condition_ids[tr.condition].clone(),
                time: tr.t,
            };
            let align = match &tr.align {
                Some(pairing) => {
                    let ctrl = self.cells[self.control][tr.t].as_ref().expect("checked at build");
                    let s = derive_seed(seed, &[4, k as u64]);
                    let (pi, ci) = draw(pairing, curr.rows(), ctrl.rows(), b, s)?;
                    Some(AlignBatch {
                        x_pert: curr.select_rows(&pi),
                        x_ctrl: ctrl.select_rows(&ci),
                        condition: pair.condition.clone(),
                        time: tr.t,
                    })
                }
                None => None,
            };
            out.push(StepBatch { pair, align });
        }
        Ok(out)
    }
}

/// One epoch of training batches for `fold`, restricted to its genes and
/// training conditions.
pub fn build_pair_batches(
    ds: &SnapshotDataset,
    fold: &FoldSpec,
    mode: CouplingMethod,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<StepBatch>, Vec<SkippedPair>)> {
    let train = ds.subset_genes(&fold.genes);
    let config = BatchConfig {
        batch_size,
        temporal: mode,
        align: mode,
        sinkhorn: SinkhornConfig::default(),
        ot_subsample: 128,
    };
    let planner = BatchPlanner::new(&train, &fold.train_conditions, config, seed)?;
    Ok((planner.epoch(seed)?, planner.skipped.clone()))
}
