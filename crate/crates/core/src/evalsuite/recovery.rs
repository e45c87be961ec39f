use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::stats::{mean, pearson, r2_score, spearman};
use crate::error::{Error, Result};
use crate::numcore::{AdamState, Matrix, NodeId, Tape};

/// Responsive-block recovery up to permutation and scaling, plus the
/// invariant-block linear fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mcc_nu: f64,
    /// `assignment[j]` = estimated column matched to true coordinate j
    pub assignment: Vec<usize>,
    pub linear_r2_iota: Vec<f64>,
    pub linear_degenerate: bool,
    /// number of correlation entries forced to 0 by a constant column
    pub degenerate_columns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub r2: Vec<f64>,
    pub r2_mean: f64,
    pub spearman: Vec<f64>,
    pub spearman_mean: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mcc {
    pub mcc: f64,
    pub assignment: Vec<usize>,
    pub degenerate: usize,
}

const EXHAUSTIVE_MAX: usize = 8;

/// Heap's algorithm over all permutations of 0..n.
fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            f(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Maximum-weight perfect assignment on a square matrix by enumeration.
/// Returns `a` with row i matched to column `a[i]`.
pub fn assignment_exhaustive(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    let mut best = (f64::NEG_INFINITY, (0..n).collect::<Vec<_>>());
    for_each_permutation(n, |p| {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
        if s > best.0 {
            best = (s, p.to_vec());
        }
    });
    best.1
}

/// Maximum-weight perfect assignment by shortest augmenting paths with potentials (O(n³)).
pub fn assignment_hungarian(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    // minimize cost = −w; 1-based arrays with a virtual column 0
    let cost = |i: usize, j: usize| -w[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut a = vec![0; n];
    for j in 1..=n {
        a[p[j] - 1] = j - 1;
    }
    a
}

/// Mean absolute correlation under the best one-to-one matching of true to
/// estimated coordinates.
pub fn mcc_nu(z_hat: &Matrix<f64>, z_true: &Matrix<f64>) -> Result<Mcc> {
    if z_hat.shape() != z_true.shape() {
        return Err(Error::Dimension(format!(
            "estimated {:?} vs true {:?}",
            z_hat.shape(),
            z_true.shape()
        )));
    }
    let d = z_true.cols();
    if d == 0 {
        return Err(Error::InvalidArgument("no coordinates to match".into()));
    }
    let mut degenerate = 0;
    let mut w = vec![vec![0.0; d]; d];
    let hat_cols: Vec<Vec<f64>> = (0..d).map(|k| z_hat.column(k)).collect();
    for (j, row) in w.iter_mut().enumerate() {
        let t = z_true.column(j);
        for (k, cell) in row.iter_mut().enumerate() {
            let c = pearson(&t, &hat_cols[k])?;
            degenerate += c.degenerate as usize;
            *cell = c.value.abs();
        }
    }
    let assignment = if d <= EXHAUSTIVE_MAX {
        assignment_exhaustive(&w)
    } else {
        assignment_hungarian(&w)
    };
    let mcc = assignment.iter().enumerate().map(|(j, &k)| w[j][k]).sum::<f64>() / d as f64;
    Ok(Mcc {
        mcc,
        assignment,
        degenerate,
    })
}

/// Deterministic 80/20 row split.
pub fn split_rows(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n / 5).max(1);
    let test = idx.split_off(n - n_test);
    (idx, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// held-out R² per true coordinate
    pub r2: Vec<f64>,
    pub degenerate: bool,
}

/// OLS with intercept from `z_hat` to each column of `z_true`, scored on a
/// held-out fifth of the rows.
pub fn linear_block_fit(z_hat: &Matrix<f64>, z_true: &Matrix<f64>, seed: u64) -> Result<LinearFit> {
    let (n, d) = z_hat.shape();
    if z_true.rows() != n {
        return Err(Error::Dimension(format!("{n} estimated rows vs {} true rows", z_true.rows())));
    }
    if n < d + 2 {
        return Err(Error::InvalidArgument(format!("need ≥ {} rows, got {n}", d + 2)));
    }
    let (train, test) = split_rows(n, seed);
    let design = |rows: &[usize]| {
        DMatrix::from_fn(rows.len(), d + 1, |r, c| if c == 0 { 1.0 } else { z_hat.get(rows[r], c - 1) })
    };
    let x_train = design(&train);
    let x_test = design(&test);
    let svd = x_train.clone().svd(true, true);
    let top = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    let degenerate = rank < d + 1;
    let mut r2 = Vec::with_capacity(z_true.cols());
    for j in 0..z_true.cols() {
        let y = DVector::from_iterator(train.len(), train.iter().map(|&i| z_true.get(i, j)));
        let beta = svd
            .solve(&y, 1e-10 * top)
            .map_err(|e| Error::Degenerate(format!("least squares: {e}")))?;
        let pred = &x_test * beta;
        let truth: Vec<f64> = test.iter().map(|&i| z_true.get(i, j)).collect();
        r2.push(r2_score(&truth, pred.as_slice()).unwrap_or(0.0));
    }
    Ok(LinearFit { r2, degenerate })
}

/// Column means and standard deviations over `rows` (sd floored at 1e-12).
fn affine(m: &Matrix<f64>, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let sub = m.select_rows(rows);
    let mu = sub.column_means();
    let sd = (0..m.cols())
        .map(|c| {
            let v = sub.column(c).iter().map(|x| (x - mu[c]).powi(2)).sum::<f64>() / rows.len() as f64;
            v.sqrt().max(1e-12)
        })
        .collect();
    (mu, sd)
}

fn standardize(m: &Matrix<f64>, rows: &[usize], mu: &[f64], sd: &[f64]) -> Matrix<f64> {
    let mut s = m.select_rows(rows);
    for r in 0..s.rows() {
        for (c, v) in s.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mu[c]) / sd[c];
        }
    }
    s
}

/// Probe architecture and budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 500,
            batch_size: 128,
            learning_rate: 3e-3,
        }
    }
}

fn probe_forward(params: &[Matrix<f64>], x: &Matrix<f64>) -> Result<(Tape<f64>, NodeId)> {
    let mut t = Tape::new();
    let p = params.iter().map(|m| t.input(m.clone())).collect::<Result<Vec<_>>>()?;
    let mut h = t.constant(x.clone())?;
    for layer in 0..3 {
        h = t.matmul(h, p[2 * layer])?;
        h = t.add(h, p[2 * layer + 1])?;
        if layer < 2 {
            h = t.tanh(h)?;
        }
    }
    Ok((t, h))
}

pub const PROBE_MIN_ROWS: usize = 50;

/// MLP (two tanh hidden layers) regressing standardized `z_true` on
/// standardized `z_hat`; R² and Spearman per true factor on the test split.
pub fn probe_grounding(z_hat: &Matrix<f64>, z_true: &Matrix<f64>, seed: u64, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let n = z_hat.rows();
    if z_true.rows() != n {
        return Err(Error::Dimension(format!("{n} estimated rows vs {} true rows", z_true.rows())));
    }
    if n < PROBE_MIN_ROWS {
        return Err(Error::InvalidArgument(format!("probe needs ≥ {PROBE_MIN_ROWS} rows, got {n}")));
    }
    let (train, test) = split_rows(n, seed);
    let (mx, sx) = affine(z_hat, &train);
    let (my, sy) = affine(z_true, &train);
    let xtr = standardize(z_hat, &train, &mx, &sx);
    let ytr = standardize(z_true, &train, &my, &sy);
    let xte = standardize(z_hat, &test, &mx, &sx);
    let yte = standardize(z_true, &test, &my, &sy);
    let (din, dout, h) = (z_hat.cols(), z_true.cols(), cfg.hidden);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let shapes = [(din, h), (1, h), (h, h), (1, h), (h, dout), (1, dout)];
    let mut params: Vec<Matrix<f64>> = shapes
        .iter()
        .map(|&(r, c)| {
            if r == 1 {
                Matrix::zeros(1, c)
            } else {
                let g = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("positive sd");
                Matrix::from_vec(r, c, (0..r * c).map(|_| g.sample(&mut rng)).collect()).expect("sized")
            }
        })
        .collect();
    let total: usize = params.iter().map(Matrix::len).sum();
    let mut adam = AdamState::new(total, cfg.learning_rate);
    let mut order: Vec<usize> = (0..xtr.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xtr.select_rows(chunk);
            let yb = ytr.select_rows(chunk);
            let (mut t, out) = probe_forward(&params, &xb)?;
            let y = t.constant(yb)?;
            let diff = t.sub(out, y)?;
            let sq = t.square(diff)?;
            let loss = t.mean(sq)?;
            let grad = t.backward(loss)?;
            let mut flat: Vec<f64> = params.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
            adam.update(&mut flat, &grad)?;
            let mut off = 0;
            for m in params.iter_mut() {
                let k = m.len();
                m.as_mut_slice().copy_from_slice(&flat[off..off + k]);
                off += k;
            }
        }
    }
    let (t, out) = probe_forward(&params, &xte)?;
    let pred = t.value(out).clone();
    let mut r2 = Vec::with_capacity(dout);
    let mut rho = Vec::with_capacity(dout);
    for j in 0..dout {
        let (truth, p) = (yte.column(j), pred.column(j));
        r2.push(r2_score(&truth, &p).unwrap_or(0.0));
        rho.push(spearman(&truth, &p)?.value);
    }
    Ok(ProbeReport {
        r2_mean: mean(&r2),
        spearman_mean: mean(&rho),
        r2,
        spearman: rho,
        seed,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_vec(n, d, (0..n * d).map(|_| g.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn mcc_permutation_and_scaling() {
        let z = gaussian(200, 2, 1);
        let hat = Matrix::from_vec(
            200,
            2,
            (0..200).flat_map(|i| [-3.0 * z.get(i, 1), 2.0 * z.get(i, 0)]).collect(),
        )
        .unwrap();
        let m = mcc_nu(&hat, &z).unwrap();
        assert!((m.mcc - 1.0).abs() < 1e-12);
        assert_eq!(m.assignment, vec![1, 0]);
        let id = mcc_nu(&z, &z).unwrap();
        assert!((id.mcc - 1.0).abs() < 1e-12);
        assert_eq!(id.assignment, vec![0, 1]);
    }

    #[test]
    fn constant_column_counts_as_zero_correlation() {
        let z = gaussian(50, 2, 2);
        let mut hat = z.clone();
        for r in 0..50 {
            hat.set(r, 1, 4.0);
        }
        let m = mcc_nu(&hat, &z).unwrap();
        assert_eq!(m.degenerate, 2);
        assert!((m.mcc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn assignment_matches_brute_force_on_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            // oracle: explicit nested loops over all 24 permutations
            let mut best = (f64::NEG_INFINITY, vec![]);
            for a in 0..4 {
                for b in 0..4 {
                    for c in 0..4 {
                        for d in 0..4 {
                            let p = [a, b, c, d];
                            let mut seen = [false; 4];
                            p.iter().for_each(|&k| seen[k] = true);
                            if seen.iter().all(|&s| s) {
                                let s = w[0][a] + w[1][b] + w[2][c] + w[3][d];
                                if s > best.0 {
                                    best = (s, p.to_vec());
                                }
                            }
                        }
                    }
                }
            }
            assert_eq!(assignment_exhaustive(&w), best.1);
            assert_eq!(assignment_hungarian(&w), best.1);
        }
    }

    #[test]
    fn hungarian_agrees_with_enumeration_on_larger_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=7 {
            let w: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let score = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| w[i][j]).sum::<f64>();
            assert!((score(&assignment_hungarian(&w)) - score(&assignment_exhaustive(&w))).abs() < 1e-12);
        }
        // beyond the exhaustive cut-off the result is still a bijection
        let z = gaussian(300, 10, 5);
        let m = mcc_nu(&z, &z).unwrap();
        assert_eq!(m.assignment, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn linear_fit_cases() {
        let z = gaussian(300, 2, 6);
        let hat = Matrix::from_vec(
            300,
            2,
            (0..300)
                .flat_map(|i| {
                    let (a, b) = (z.get(i, 0), z.get(i, 1));
                    [2.0 * a - b + 3.0, 0.5 * a + 1.5 * b - 1.0]
                })
                .collect(),
        )
        .unwrap();
        let f = linear_block_fit(&hat, &z, 0).unwrap();
        assert!(!f.degenerate);
        assert!(f.r2.iter().all(|r| (r - 1.0).abs() < 1e-10), "{:?}", f.r2);

        let one = gaussian(40, 1, 7);
        let lin = one.map(|v| 2.0 * v + 1.0);
        assert!((linear_block_fit(&lin, &one, 1).unwrap().r2[0] - 1.0).abs() < 1e-10);

        for seed in 0..5 {
            let noise = gaussian(2000, 2, 100 + seed);
            let f = linear_block_fit(&noise, &z_big(seed), seed).unwrap();
            assert!(f.r2.iter().all(|r| r.abs() < 0.05), "{:?}", f.r2);
        }

        let mut flat = gaussian(30, 2, 8);
        for r in 0..30 {
            flat.set(r, 1, 2.0 * flat.get(r, 0));
        }
        assert!(linear_block_fit(&flat, &one.select_rows(&(0..30).collect::<Vec<_>>()), 0).unwrap().degenerate);
        assert!(linear_block_fit(&gaussian(3, 2, 0), &gaussian(3, 1, 0), 0).is_err());
    }

    fn z_big(seed: u64) -> Matrix<f64> {
        gaussian(2000, 2, 200 + seed)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mcc_invariant_to_permutation_and_scaling(seed in 0u64..1000, perm_seed in 0u64..1000, scales in prop::collection::vec(0.1f64..5.0, 3), signs in prop::collection::vec(any::<bool>(), 3)) {
            let z = gaussian(100, 3, seed);
            let hat = gaussian(100, 3, seed + 1).zip_map(&z, |a, b| 0.3 * a + b).unwrap();
            let mut perm: Vec<usize> = (0..3).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let mut moved = hat.select_cols(&perm);
            for r in 0..100 {
                for (c, v) in moved.row_mut(r).iter_mut().enumerate() {
                    *v *= if signs[c] { scales[c] } else { -scales[c] };
                }
            }
            let a = mcc_nu(&hat, &z).unwrap().mcc;
            let b = mcc_nu(&moved, &z).unwrap().mcc;
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn linear_fit_invariant_to_affine_maps(seed in 0u64..1000, a in prop::collection::vec(-2.0f64..2.0, 4), c in prop::collection::vec(-5.0f64..5.0, 2)) {
            let m = [[a[0], a[1]], [a[2], a[3]]];
            let det: f64 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            prop_assume!(det.abs() > 0.2);
            let z = gaussian(120, 2, seed);
            let hat = gaussian(120, 2, seed + 7).zip_map(&z, |e, v| v + 0.5 * e).unwrap().map(|v| v + v.powi(3) * 0.1);
            let mut moved = hat.clone();
            for r in 0..120 {
                let (x, y) = (hat.get(r, 0), hat.get(r, 1));
                moved.set(r, 0, m[0][0] * x + m[0][1] * y + c[0]);
                moved.set(r, 1, m[1][0] * x + m[1][1] * y + c[1]);
            }
            let f0 = linear_block_fit(&hat, &z, seed).unwrap().r2;
            let f1 = linear_block_fit(&moved, &z, seed).unwrap().r2;
            for (x, y) in f0.iter().zip(&f1) {
                prop_assert!((x - y).abs() <= 1e-8, "{f0:?} {f1:?}");
            }
        }
    }

    fn probe_cfg() -> ProbeConfig {
        ProbeConfig::default()
    }

    #[test]
    fn probe_identity_is_perfect() {
        let z = gaussian(400, 2, 9);
        let p = probe_grounding(&z, &z, 0, &probe_cfg()).unwrap();
        assert!(p.r2.iter().all(|r| *r > 0.999), "{p:?}");
        assert!(p.spearman.iter().all(|s| *s > 0.999), "{p:?}");
        assert!(probe_grounding(&gaussian(49, 2, 0), &gaussian(49, 2, 0), 0, &probe_cfg()).is_err());
    }

    #[test]
    fn probe_learns_monotone_cube() {
        let z = gaussian(1000, 2, 10);
        let cube = z.map(|v| v * v * v);
        let p = probe_grounding(&cube, &z, 1, &probe_cfg()).unwrap();
        assert!(p.r2.iter().all(|r| *r >= 0.95), "{p:?}");
        assert!(p.spearman.iter().all(|s| *s > 0.99), "{p:?}");
    }

    #[test]
    fn probe_on_noise_explains_nothing() {
        for seed in 0..5 {
            let z = gaussian(500, 2, 20 + seed);
            let noise = gaussian(500, 2, 40 + seed);
            let p = probe_grounding(&noise, &z, seed, &probe_cfg()).unwrap();
            assert!(p.r2.iter().all(|r| *r <= 0.1), "{p:?}");
        }
    }
}
