//! Pairings between two cell populations: uniform independent sampling and
//! entropic optimal transport (log-domain Sinkhorn), and matching by a
//! shared lineage key.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMethod {
    Independent,
    Sinkhorn,
    /// pairs cells that carry the same lineage key; needs keys
    Matched,
}

impl std::str::FromStr for CouplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(CouplingMethod::Independent),
            "sinkhorn" => Ok(CouplingMethod::Sinkhorn),
            "matched" => Ok(CouplingMethod::Matched),
            other => Err(Error::InvalidArgument(format!("unknown coupling mode `{other}`"))),
        }
    }
}

/// Weighted (src, dst) index pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingPlan {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub w: Vec<f64>,
    pub method: CouplingMethod,
}

impl CouplingPlan {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Checks index bounds and that weights are nonnegative and sum to 1.
    pub fn validate(&self, n_src: usize, n_dst: usize) -> Result<()> {
        if self.src.len() != self.dst.len() || self.src.len() != self.w.len() {
            return Err(Error::InvalidArgument("coupling plan columns differ in length".into()));
        }
        if let Some(i) = self.src.iter().position(|&s| s >= n_src) {
            return Err(Error::InvalidArgument(format!("pair {i}: src index out of range")));
        }
        if let Some(i) = self.dst.iter().position(|&d| d >= n_dst) {
            return Err(Error::InvalidArgument(format!("pair {i}: dst index out of range")));
        }
        if self.w.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("coupling weights must be finite and ≥ 0".into()));
        }
        let total: f64 = self.w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("coupling weights sum to {total}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `n_pairs` uniform draws of (src, dst), each weighted `1/n_pairs`.
pub fn independent_coupling(n_src: usize, n_dst: usize, n_pairs: usize, seed: u64) -> Result<CouplingPlan> {
    if n_src == 0 || n_dst == 0 {
        return Err(Error::InvalidArgument("cannot couple an empty population".into()));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::with_capacity(n_pairs);
    let mut dst = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        src.push(rng.random_range(0..n_src));
        dst.push(rng.random_range(0..n_dst));
    }
    Ok(CouplingPlan {
        src,
        dst,
        w: uniform_weights(n_pairs),
        method: CouplingMethod::Independent,
    })
}

/// Index pairs `(i, j)` with `src_keys[i] == dst_keys[j]`, in source order.
pub fn key_matches<K: Eq + std::hash::Hash>(src_keys: &[K], dst_keys: &[K]) -> (Vec<usize>, Vec<usize>) {
    let mut by_key: std::collections::HashMap<&K, Vec<usize>> = std::collections::HashMap::new();
    for (j, k) in dst_keys.iter().enumerate() {
        by_key.entry(k).or_default().push(j);
    }
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for (i, k) in src_keys.iter().enumerate() {
        for &j in by_key.get(k).into_iter().flatten() {
            src.push(i);
            dst.push(j);
        }
    }
    (src, dst)
}

/// `n_pairs` uniform draws from the key-matched pairs.
pub fn matched_coupling<K: Eq + std::hash::Hash>(
    src_keys: &[K],
    dst_keys: &[K],
    n_pairs: usize,
    seed: u64,
) -> Result<CouplingPlan> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be ≥ 1".into()));
    }
    let (ms, md) = key_matches(src_keys, dst_keys);
    if ms.is_empty() {
        return Err(Error::InvalidArgument("no lineage key is shared by the two populations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut src, mut dst) = (Vec::with_capacity(n_pairs), Vec::with_capacity(n_pairs));
    for _ in 0..n_pairs {
        let k = rng.random_range(0..ms.len());
        src.push(ms[k]);
        dst.push(md[k]);
    }
    Ok(CouplingPlan {
        src,
        dst,
        w: uniform_weights(n_pairs),
        method: CouplingMethod::Matched,
    })
}

/// Stopping parameters of [`sinkhorn`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    /// entropic regularization; `None` means 0.05 × median cost
    pub epsilon: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: None,
            tol: 1e-6,
            max_iters: 10_000,
        }
    }
}

/// Dense entropic plan with its convergence trace.
#[derive(Clone, Debug)]
pub struct SinkhornResult<T> {
    pub plan: Matrix<T>,
    pub iterations: usize,
    /// row + column L1 marginal violation after each iteration
    pub violations: Vec<T>,
}

impl<T: Scalar> SinkhornResult<T> {
    pub fn violation(&self) -> T {
        self.violations.last().copied().unwrap_or_else(T::zero)
    }
}

fn log_sum_exp<T: Scalar>(v: impl Iterator<Item = T> + Clone) -> T {
    let m = v.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<T>().ln()
}

/// Median of all entries of a cost matrix.
pub fn median_cost<T: Scalar>(cost: &Matrix<T>) -> T {
    let mut v = cost.as_slice().to_vec();
    if v.is_empty() {
        return T::zero();
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / T::lit(2.0)
    }
}

/// Log-domain Sinkhorn iterations with uniform marginals.
///
/// Stops once the row and column L1 marginal violations are both ≤ `tol`.
pub fn sinkhorn<T: Scalar>(cost: &Matrix<T>, epsilon: T, max_iters: usize, tol: T) -> Result<SinkhornResult<T>> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("cannot couple an empty population".into()));
    }
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !cost.is_finite() {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    let log_a = -T::from_usize(n).unwrap().ln();
    let log_b = -T::from_usize(m).unwrap().ln();
    let a = log_a.exp();
    let b = log_b.exp();
    let kernel = cost.map(|c| -c / epsilon);
    let kt = kernel.transpose();
    let mut f = vec![T::zero(); n];
    let mut g = vec![T::zero(); m];
    let mut violations = Vec::new();
    let plan_of = |f: &[T], g: &[T]| {
        let mut p = Matrix::zeros(n, m);
        for i in 0..n {
            let krow = kernel.row(i);
            let prow = p.row_mut(i);
            for j in 0..m {
                prow[j] = (f[i] + g[j] + krow[j]).exp();
            }
        }
        p
    };
    for it in 1..=max_iters {
        for i in 0..n {
            let row = kernel.row(i);
            f[i] = log_a - log_sum_exp(row.iter().zip(&g).map(|(&k, &gj)| k + gj));
        }
        for j in 0..m {
            let col = kt.row(j);
            g[j] = log_b - log_sum_exp(col.iter().zip(&f).map(|(&k, &fi)| k + fi));
        }
        // columns are exact after the g-update up to rounding; rows carry the error
        let mut row_err = T::zero();
        for i in 0..n {
            let s = log_sum_exp(kernel.row(i).iter().zip(&g).map(|(&k, &gj)| k + gj)) + f[i];
            row_err += (s.exp() - a).abs();
        }
        let mut col_err = T::zero();
        for j in 0..m {
            let s = log_sum_exp(kt.row(j).iter().zip(&f).map(|(&k, &fi)| k + fi)) + g[j];
            col_err += (s.exp() - b).abs();
        }
        let v = row_err + col_err;
        violations.push(v);
        if row_err <= tol && col_err <= tol {
            return Ok(SinkhornResult {
                plan: plan_of(&f, &g),
                iterations: it,
                violations,
            });
        }
    }
    Err(Error::SinkhornNotConverged {
        iters: max_iters,
        violation: violations.last().map_or(f64::NAN, |v| v.to_f64().unwrap_or(f64::NAN)),
    })
}

/// Draws `n_pairs` (src, dst) pairs from a dense plan, each weighted `1/n_pairs`.
pub fn sample_plan<T: Scalar>(plan: &Matrix<T>, n_pairs: usize, seed: u64) -> Result<CouplingPlan> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be ≥ 1".into()));
    }
    let weights: Vec<f64> = plan.as_slice().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("transport plan cannot be sampled: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = plan.cols();
    let (mut src, mut dst) = (Vec::with_capacity(n_pairs), Vec::with_capacity(n_pairs));
    for _ in 0..n_pairs {
        let k = rng.sample(&dist);
        src.push(k / m);
        dst.push(k % m);
    }
    Ok(CouplingPlan {
        src,
        dst,
        w: uniform_weights(n_pairs),
        method: CouplingMethod::Sinkhorn,
    })
}

/// Entropic OT plan for `cost`, sampled into `n_pairs` pairs.
pub fn sinkhorn_coupling<T: Scalar>(
    cost: &Matrix<T>,
    config: &SinkhornConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<CouplingPlan> {
    let eps = match config.epsilon {
        Some(e) => T::lit(e),
        None => default_epsilon(cost),
    };
    let res = sinkhorn(cost, eps, config.max_iters, T::lit(config.tol))?;
    sample_plan(&res.plan, n_pairs, seed)
}

/// 0.05 × median cost, floored so that an all-zero cost still has a valid ε.
pub fn default_epsilon<T: Scalar>(cost: &Matrix<T>) -> T {
    let e = T::lit(0.05) * median_cost(cost);
    if e > T::zero() {
        e
    } else {
        T::lit(0.05)
    }
}

/// Pairwise squared Euclidean distances between rows of `a` and rows of `b`.
pub fn squared_euclidean_cost(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<Matrix<f64>> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "populations have {} and {} genes",
            a.cols(),
            b.cols()
        )));
    }
    let mut c = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let d: f64 = ra.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            c.set(i, j, d);
        }
    }
    Ok(c)
}

/// Couples perturbed cells (src) with control cells (dst) observed at the same time.
pub fn crossfit_coupling(
    pert: &Matrix<f64>,
    ctrl: &Matrix<f64>,
    method: CouplingMethod,
    sinkhorn_config: &SinkhornConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<CouplingPlan> {
    if pert.rows() == 0 || ctrl.rows() == 0 {
        return Err(Error::InvalidArgument("cannot couple an empty population".into()));
    }
    match method {
        CouplingMethod::Independent => independent_coupling(pert.rows(), ctrl.rows(), n_pairs, seed),
        CouplingMethod::Sinkhorn => {
            let cost = squared_euclidean_cost(pert, ctrl)?;
            sinkhorn_coupling(&cost, sinkhorn_config, n_pairs, seed)
        }
        CouplingMethod::Matched => Err(Error::InvalidArgument(
            "matched coupling needs lineage keys; use matched_coupling".into(),
        )),
    }
}
