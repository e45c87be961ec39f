use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{GaussianDiag, LatentState, TransitionLaw};
use crate::numcore::{Matrix, LEAKY_SLOPE};

/// Knobs of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d_iota: usize,
    pub d_nu: usize,
    pub p: usize,
    /// last time index; snapshots are taken at t = 0..=T
    #[serde(rename = "T")]
    pub horizon: usize,
    /// cells per (environment, time)
    pub n_cells: usize,
    pub alpha: f64,
    pub mixing_depth: usize,
    pub max_condition: f64,
    /// standard deviation of the embedding entries times √d
    pub embed_scale: f64,
    /// probability that a moment-shift environment targets a given coordinate
    pub target_prob: f64,
    pub unpaired: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_iota: 2,
            d_nu: 3,
            p: 20,
            horizon: 5,
            n_cells: 2000,
            alpha: 0.7,
            mixing_depth: 2,
            max_condition: 4.0,
            embed_scale: 5.0,
            target_prob: 0.75,
            unpaired: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_iota == 0 || self.d_nu == 0 {
            return Err(Error::InvalidArgument("d_iota and d_nu must be ≥ 1".into()));
        }
        if self.p < self.d_iota + self.d_nu {
            return Err(Error::InvalidArgument(format!(
                "p = {} is below the latent dimension {}",
                self.p,
                self.d_iota + self.d_nu
            )));
        }
        if self.horizon == 0 || self.n_cells == 0 {
            return Err(Error::InvalidArgument("T and n_cells must be ≥ 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(1.0..=20.0).contains(&self.max_condition) {
            return Err(Error::InvalidArgument("max_condition must lie in [1, 20]".into()));
        }
        if !(self.embed_scale > 0.0 && self.embed_scale.is_finite()) {
            return Err(Error::InvalidArgument("embed_scale must be positive".into()));
        }
        if !(self.target_prob > 0.0 && self.target_prob <= 1.0) {
            return Err(Error::InvalidArgument("target_prob must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Transition structure shared by every environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub d_iota: usize,
    pub d_nu: usize,
    pub p: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub alpha: f64,
    pub mixing_depth: usize,
    /// d_ι × d_ι
    pub theta_iota: Matrix<f64>,
    /// d_ν × d_ν, strictly lower; zero where `dag_mask` is false
    pub theta_nu: Matrix<f64>,
    /// d_ν × d_ι parents of the responsive block in z_ι
    pub theta_nu_iota: Matrix<f64>,
    pub dag_mask: Vec<Vec<bool>>,
    pub iota_parent_mask: Vec<Vec<bool>>,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Jacobian of the noiseless transition at z = 0.
    pub fn linearized(&self) -> Matrix<f64> {
        let (di, dn) = (self.d_iota, self.d_nu);
        let mut j = Matrix::zeros(di + dn, di + dn);
        for r in 0..di {
            for c in 0..di {
                let eye = if r == c { self.alpha } else { 0.0 };
                j.set(r, c, eye + (1.0 - self.alpha) * self.theta_iota.get(r, c));
            }
        }
        for r in 0..dn {
            for c in 0..di {
                j.set(di + r, c, self.theta_nu_iota.get(r, c));
            }
            for c in 0..dn {
                j.set(di + r, di + c, self.theta_nu.get(r, c));
            }
        }
        j
    }

    /// Noiseless invariant drift `α z + (1−α) tanh(Θ_ι z)`.
    pub fn f_iota(&self, z_iota: &[f64]) -> Vec<f64> {
        (0..self.d_iota)
            .map(|r| {
                let a: f64 = (0..self.d_iota).map(|c| self.theta_iota.get(r, c) * z_iota[c]).sum();
                self.alpha * z_iota[r] + (1.0 - self.alpha) * a.tanh()
            })
            .collect()
    }

    /// Parent mechanism `tanh(Σ θ_jk z_k)` of responsive coordinate `j`.
    pub fn f_nu(&self, j: usize, z_iota: &[f64], z_nu: &[f64]) -> f64 {
        let a: f64 = (0..self.d_iota).map(|c| self.theta_nu_iota.get(j, c) * z_iota[c]).sum::<f64>()
            + (0..j).map(|c| self.theta_nu.get(j, c) * z_nu[c]).sum::<f64>();
        a.tanh()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Baseline,
    MomentShift,
    Isolation,
}

/// One intervention condition of the ground-truth process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: String,
    pub kind: EnvKind,
    /// intervention targets over the responsive coordinates
    pub u: Vec<u8>,
    pub mu_nu: Vec<f64>,
    pub var_nu: Vec<f64>,
    /// coordinates whose mechanism is replaced by the constant `c_j = 0`
    pub isolated: Vec<bool>,
}

impl Environment {
    /// Names of the targeted responsive coordinates.
    pub fn target_names(&self) -> Vec<String> {
        self.u
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(j, _)| format!("z_nu_{}", j + 1))
            .collect()
    }
}

/// Innovation laws of every environment; environment 0 is the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentBank {
    pub mu_iota: Vec<f64>,
    pub var_iota: Vec<f64>,
    pub environments: Vec<Environment>,
}

impl EnvironmentBank {
    pub fn baseline(&self) -> &Environment {
        &self.environments[0]
    }

    pub fn get(&self, id: &str) -> Result<&Environment> {
        self.environments
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::UnknownCondition(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.environments.iter().map(|e| e.id.clone()).collect()
    }

    pub fn moment_shift(&self) -> impl Iterator<Item = &Environment> {
        self.environments.iter().filter(|e| e.kind == EnvKind::MomentShift)
    }
}

/// Injective observation map `x = C · h_L`, `h_l = lrelu(W_l h_{l−1})`, `h_0 = z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    /// square d × d layers, applied as `W · h`
    pub layers: Vec<Matrix<f64>>,
    /// p × d embedding
    pub embed: Matrix<f64>,
}

impl Mixing {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut h = z.to_vec();
        for w in &self.layers {
            h = (0..w.rows())
                .map(|r| {
                    let a: f64 = w.row(r).iter().zip(&h).map(|(a, b)| a * b).sum();
                    if a > 0.0 {
                        a
                    } else {
                        LEAKY_SLOPE * a
                    }
                })
                .collect();
        }
        (0..self.embed.rows())
            .map(|r| self.embed.row(r).iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Mixes every row of a latent matrix.
    pub fn apply_rows(&self, z: &Matrix<f64>) -> Matrix<f64> {
        let p = self.embed.rows();
        let mut out = Matrix::zeros(z.rows(), p);
        for i in 0..z.rows() {
            out.row_mut(i).copy_from_slice(&self.apply(z.row(i)));
        }
        out
    }
}

/// Complete ground truth: structure, environments, mixing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub bank: EnvironmentBank,
    pub mixing: Mixing,
}

impl Generator {
    pub fn d_latent(&self) -> usize {
        self.spec.d_iota + self.spec.d_nu
    }

    /// Mean of `z^t` given `z^{t−1}` in environment `env`.
    pub fn transition_mean(&self, env: &Environment, z_iota: &[f64], z_nu: &[f64]) -> Vec<f64> {
        let mut m = self.spec.f_iota(z_iota);
        for (k, v) in m.iter_mut().enumerate() {
            *v += self.bank.mu_iota[k];
        }
        for j in 0..self.spec.d_nu {
            let mech = if env.isolated[j] {
                0.0
            } else {
                self.spec.f_nu(j, z_iota, z_nu)
            };
            m.push(mech + env.mu_nu[j]);
        }
        m
    }

    pub fn transition_var(&self, env: &Environment) -> Vec<f64> {
        let mut v = self.bank.var_iota.clone();
        v.extend_from_slice(&env.var_nu);
        v
    }
}

impl TransitionLaw for Generator {
    fn d_iota(&self) -> usize {
        self.spec.d_iota
    }

    fn transition(&self, z_prev: &LatentState, condition: &str) -> Result<GaussianDiag<f64>> {
        if z_prev.z_iota.len() != self.spec.d_iota || z_prev.z_nu.len() != self.spec.d_nu {
            return Err(Error::Dimension("latent state does not match the generator".into()));
        }
        let env = self.bank.get(condition)?;
        Ok(GaussianDiag {
            mean: self.transition_mean(env, &z_prev.z_iota, &z_prev.z_nu),
            logvar: self.transition_var(env).iter().map(|v| v.ln()).collect(),
        })
    }
}

/// Outcome of the natural-parameter rank check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    pub rank: usize,
    pub required: usize,
    pub pass: bool,
}

/// Stacked natural-parameter difference `(μ/σ² − μ₀/σ₀² ; −½(1/σ² − 1/σ₀²))`.
pub fn delta_eta(env: &Environment, base: &Environment) -> Vec<f64> {
    let n = env.mu_nu.len();
    let mut v = Vec::with_capacity(2 * n);
    for j in 0..n {
        v.push(env.mu_nu[j] / env.var_nu[j] - base.mu_nu[j] / base.var_nu[j]);
    }
    for j in 0..n {
        v.push(-0.5 * (1.0 / env.var_nu[j] - 1.0 / base.var_nu[j]));
    }
    v
}

/// Singular values above `1e-8 ×` the largest.
pub fn numerical_rank(m: &Matrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = a.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-8 * top).count()
}

/// Rank of the first `2 d_ν` moment-shift environments' Δη rows.
pub fn check_rank_condition(bank: &EnvironmentBank) -> Result<RankCheck> {
    let base = bank.baseline();
    let dn = base.mu_nu.len();
    let rows: Vec<Vec<f64>> = bank.moment_shift().take(2 * dn).map(|e| delta_eta(e, base)).collect();
    if rows.len() < 2 * dn {
        return Err(Error::InvalidArgument(format!(
            "rank check needs {} moment-shift environments, found {}",
            2 * dn,
            rows.len()
        )));
    }
    let rank = numerical_rank(&Matrix::from_rows(&rows)?);
    Ok(RankCheck {
        rank,
        required: 2 * dn,
        pass: rank == 2 * dn,
    })
}

fn spectral_norm(m: &Matrix<f64>) -> f64 {
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    a.singular_values().iter().cloned().fold(0.0, f64::max)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix<f64> {
    let data = (0..r * c).map(|_| scale * { let e: f64 = StandardNormal.sample(rng); e }).collect::<Vec<f64>>();
    Matrix::from_vec(r, c, data).expect("sized")
}

/// Rebuilds `m` with singular values clipped to `[s_max / κ, s_max]`, then
/// rescaled so their geometric mean is 1.
fn condition_clip(m: &Matrix<f64>, kappa: f64) -> Matrix<f64> {
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut s: Vec<f64> = svd.singular_values.iter().map(|&x| x.max(top / kappa)).collect();
    let gm = (s.iter().map(|x| x.ln()).sum::<f64>() / s.len() as f64).exp();
    s.iter_mut().for_each(|x| *x /= gm);
    let rebuilt = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s)) * &vt;
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, rebuilt[(r, c)]);
        }
    }
    out
}

fn signed_weight(rng: &mut ChaCha8Rng) -> f64 {
    let mag = rng.random_range(0.5..1.5);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn draw_moments(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mu = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var = (0..n).map(|_| rng.random_range(0.25..2.0)).collect();
    (mu, var)
}

const SPECTRAL_TARGET: f64 = 0.95;
const MAX_RESAMPLES: usize = 100;

/// Draws structure, environments and mixing from `config`.
pub fn make_generator(config: &SynthConfig) -> Result<Generator> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (di, dn) = (config.d_iota, config.d_nu);

    let mut theta_iota = gaussian_matrix(&mut rng, di, di, 1.0);
    let norm = spectral_norm(&theta_iota);
    if norm > 0.0 {
        theta_iota = theta_iota.map(|v| v * 0.9 / norm);
    }
    let mut dag_mask = vec![vec![false; dn]; dn];
    let mut theta_nu = Matrix::zeros(dn, dn);
    for (j, row) in dag_mask.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate().take(j) {
            if rng.random_bool(0.5) {
                *cell = true;
                theta_nu.set(j, k, signed_weight(&mut rng));
            }
        }
    }
    let mut iota_parent_mask = vec![vec![false; di]; dn];
    let mut theta_nu_iota = Matrix::zeros(dn, di);
    for (j, row) in iota_parent_mask.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            if rng.random_bool(0.5) {
                *cell = true;
                theta_nu_iota.set(j, k, signed_weight(&mut rng));
            }
        }
    }
    let mut spec = GeneratorSpec {
        d_iota: di,
        d_nu: dn,
        p: config.p,
        horizon: config.horizon,
        alpha: config.alpha,
        mixing_depth: config.mixing_depth,
        theta_iota,
        theta_nu,
        theta_nu_iota,
        dag_mask,
        iota_parent_mask,
        seed: config.seed,
    };
    // shrink the responsive rows until the linearized map is a contraction
    while spectral_norm(&spec.linearized()) >= SPECTRAL_TARGET {
        spec.theta_nu = spec.theta_nu.map(|v| v * 0.9);
        spec.theta_nu_iota = spec.theta_nu_iota.map(|v| v * 0.9);
    }

    let (mu_iota, var_iota) = draw_moments(&mut rng, di);
    let (mu0, var0) = draw_moments(&mut rng, dn);
    let baseline = Environment {
        id: "ctrl".into(),
        kind: EnvKind::Baseline,
        u: vec![0; dn],
        mu_nu: mu0.clone(),
        var_nu: var0.clone(),
        isolated: vec![false; dn],
    };
    let mut shifts = Vec::new();
    let mut passed = false;
    for _ in 0..MAX_RESAMPLES {
        shifts.clear();
        for k in 0..2 * dn {
            let mut u = vec![0u8; dn];
            while u.iter().all(|&b| b == 0) {
                u.iter_mut().for_each(|b| *b = rng.random_bool(config.target_prob) as u8);
            }
            let (mu, var) = draw_moments(&mut rng, dn);
            let mu_nu = (0..dn).map(|j| if u[j] == 1 { mu[j] } else { mu0[j] }).collect();
            let var_nu = (0..dn).map(|j| if u[j] == 1 { var[j] } else { var0[j] }).collect();
            shifts.push(Environment {
                id: format!("shift_{}", k + 1),
                kind: EnvKind::MomentShift,
                u,
                mu_nu,
                var_nu,
                isolated: vec![false; dn],
            });
        }
        let mut envs = vec![baseline.clone()];
        envs.extend(shifts.iter().cloned());
        let probe = EnvironmentBank {
            mu_iota: mu_iota.clone(),
            var_iota: var_iota.clone(),
            environments: envs,
        };
        if check_rank_condition(&probe)?.pass {
            passed = true;
            break;
        }
    }
    if !passed {
        return Err(Error::RankCondition(MAX_RESAMPLES));
    }
    let mut environments = vec![baseline];
    environments.extend(shifts);
    for j in 0..dn {
        let mut u = vec![0u8; dn];
        u[j] = 1;
        let mut isolated = vec![false; dn];
        isolated[j] = true;
        environments.push(Environment {
            id: format!("iso_{}", j + 1),
            kind: EnvKind::Isolation,
            u,
            mu_nu: mu0.clone(),
            var_nu: var0.clone(),
            isolated,
        });
    }
    let bank = EnvironmentBank {
        mu_iota,
        var_iota,
        environments,
    };

    let d = di + dn;
    let layers = (0..config.mixing_depth)
        .map(|_| condition_clip(&gaussian_matrix(&mut rng, d, d, 1.0), config.max_condition))
        .collect();
    let embed = loop {
        let c = gaussian_matrix(&mut rng, config.p, d, config.embed_scale / (d as f64).sqrt());
        if numerical_rank(&c) == d {
            break c;
        }
    };
    Ok(Generator {
        spec,
        bank,
        mixing: Mixing { layers, embed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::transition_score_diff;

    fn small() -> SynthConfig {
        SynthConfig {
            n_cells: 50,
            ..SynthConfig::default()
        }
    }

    /// Gaussian elimination with partial pivoting, independent of the SVD route.
    fn elimination_rank(rows: &[Vec<f64>]) -> usize {
        let mut m: Vec<Vec<f64>> = rows.to_vec();
        let (n, c) = (m.len(), m[0].len());
        let scale = m.iter().flatten().fold(0.0f64, |a, &b| a.max(b.abs()));
        let mut rank = 0;
        for col in 0..c {
            let pivot = (rank..n).max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap());
            let Some(pr) = pivot else { break };
            if m[pr][col].abs() <= 1e-9 * scale {
                continue;
            }
            m.swap(rank, pr);
            for r in 0..n {
                if r != rank {
                    let f = m[r][col] / m[rank][col];
                    for k in 0..c {
                        m[r][k] -= f * m[rank][k];
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn default_generator_layout() {
        let g = make_generator(&small()).unwrap();
        let kinds: Vec<EnvKind> = g.bank.environments.iter().map(|e| e.kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == EnvKind::Baseline).count(), 1);
        assert_eq!(kinds.iter().filter(|k| **k == EnvKind::MomentShift).count(), 6);
        assert_eq!(kinds.iter().filter(|k| **k == EnvKind::Isolation).count(), 3);
        assert_eq!(g.bank.baseline().u, vec![0, 0, 0]);
        assert!(check_rank_condition(&g.bank).unwrap().pass);
        assert!(spectral_norm(&g.spec.linearized()) < 1.0);
        for e in &g.bank.environments {
            assert!(e.var_nu.iter().all(|&v| v > 0.0));
        }
        for j in 0..3 {
            for k in j..3 {
                assert!(!g.spec.dag_mask[j][k]);
                assert_eq!(g.spec.theta_nu.get(j, k), 0.0);
            }
        }
        for w in &g.mixing.layers {
            let a = DMatrix::from_row_slice(5, 5, w.as_slice());
            let sv = a.singular_values();
            let (mx, mn) = sv.iter().fold((0.0f64, f64::MAX), |(a, b), &s| (a.max(s), b.min(s)));
            assert!(mx / mn <= 20.0 + 1e-9);
        }
    }

    #[test]
    fn same_seed_same_generator() {
        assert_eq!(make_generator(&small()).unwrap(), make_generator(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(make_generator(&small()).unwrap(), make_generator(&other).unwrap());
    }

    #[test]
    fn alpha_one_is_identity_drift() {
        let mut g = make_generator(&small()).unwrap();
        g.spec.alpha = 1.0;
        let z = [0.3, -1.7];
        assert_eq!(g.spec.f_iota(&z), z.to_vec());
    }

    #[test]
    fn single_responsive_coordinate_draws_parents_from_iota() {
        let cfg = SynthConfig { d_nu: 1, ..small() };
        let g = make_generator(&cfg).unwrap();
        assert_eq!(g.spec.dag_mask, vec![vec![false]]);
        assert_eq!(g.spec.f_nu(0, &[0.0, 0.0], &[5.0]), 0.0);
    }

    #[test]
    fn rank_check_special_cases() {
        let base = Environment {
            id: "ctrl".into(),
            kind: EnvKind::Baseline,
            u: vec![0, 0],
            mu_nu: vec![0.0, 0.0],
            var_nu: vec![1.0, 1.0],
            isolated: vec![false; 2],
        };
        let same: Vec<Environment> = (0..4)
            .map(|k| Environment {
                id: format!("s{k}"),
                kind: EnvKind::MomentShift,
                ..base.clone()
            })
            .collect();
        let mut envs = vec![base.clone()];
        envs.extend(same);
        let bank = EnvironmentBank {
            mu_iota: vec![0.0],
            var_iota: vec![1.0],
            environments: envs,
        };
        let r = check_rank_condition(&bank).unwrap();
        assert_eq!((r.rank, r.pass), (0, false));

        // Δη rows equal to ±e_k in R⁴ (variance shrinkage gives the negative sign)
        let basis = [
            (vec![1.0, 0.0], vec![1.0, 1.0]),
            (vec![0.0, 1.0], vec![1.0, 1.0]),
            (vec![0.0, 0.0], vec![1.0 / 3.0, 1.0]),
            (vec![0.0, 0.0], vec![1.0, 1.0 / 3.0]),
        ];
        let mut envs = vec![base.clone()];
        for (k, (mu, var)) in basis.into_iter().enumerate() {
            envs.push(Environment {
                id: format!("b{k}"),
                kind: EnvKind::MomentShift,
                mu_nu: mu,
                var_nu: var,
                ..base.clone()
            });
        }
        let bank = EnvironmentBank { environments: envs, ..bank };
        let rows: Vec<Vec<f64>> = bank.moment_shift().map(|e| delta_eta(e, &base)).collect();
        for (k, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let expect = match (c == k, k < 2) {
                    (true, true) => 1.0,
                    (true, false) => -1.0,
                    _ => 0.0,
                };
                assert!((v - expect).abs() < 1e-15, "{rows:?}");
            }
        }
        assert_eq!(check_rank_condition(&bank).unwrap().rank, 4);

        let too_few = EnvironmentBank {
            environments: bank.environments[..3].to_vec(),
            ..bank
        };
        assert!(check_rank_condition(&too_few).is_err());
    }

    #[test]
    fn rank_agrees_with_elimination_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let base = Environment {
                id: "ctrl".into(),
                kind: EnvKind::Baseline,
                u: vec![0; 3],
                mu_nu: vec![0.1, -0.2, 0.3],
                var_nu: vec![1.0, 0.8, 1.2],
                isolated: vec![false; 3],
            };
            let mut rows = Vec::new();
            for k in 0..6 {
                let mut e = base.clone();
                e.id = format!("s{k}");
                // perturb only some coordinates, sometimes duplicating rows, to vary the rank
                for j in 0..3 {
                    if rng.random_bool(0.5) {
                        e.mu_nu[j] += rng.random_range(-0.5..0.5);
                        e.var_nu[j] += rng.random_range(0.0..0.5);
                    }
                }
                if trial % 3 == 0 && k > 3 {
                    e.mu_nu = base.mu_nu.clone();
                    e.var_nu = base.var_nu.clone();
                }
                rows.push(delta_eta(&e, &base));
            }
            let svd_rank = numerical_rank(&Matrix::from_rows(&rows).unwrap());
            let nonzero = rows.iter().any(|r| r.iter().any(|v| *v != 0.0));
            let oracle = if nonzero { elimination_rank(&rows) } else { 0 };
            assert_eq!(svd_rank, oracle, "trial {trial}");
        }
    }

    #[test]
    fn mixing_is_numerically_injective() {
        let g = make_generator(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 10_000 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = z.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect();
            let dz: f64 = z.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dz < 1e-3 {
                continue;
            }
            let (x, y) = (g.mixing.apply(&z), g.mixing.apply(&w));
            let dx: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(dx > 0.0);
            checked += 1;
        }
    }

    #[test]
    fn ground_truth_iota_score_block_is_exactly_zero() {
        let g = make_generator(&small()).unwrap();
        let zp = LatentState::new(vec![0.4, -0.3], vec![1.0, -0.5, 0.2]);
        let zt = LatentState::new(vec![-1.1, 0.6], vec![0.3, 0.9, -2.0]);
        for env in g.bank.ids().iter().skip(1) {
            let s = transition_score_diff(&g, &zt, &zp, env, "ctrl").unwrap();
            assert_eq!(s.iota, vec![0.0; 2]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { d_nu: 0, ..small() },
            SynthConfig { p: 4, ..small() },
            SynthConfig { alpha: 1.0, ..small() },
            SynthConfig { n_cells: 0, ..small() },
            SynthConfig { max_condition: 25.0, ..small() },
            SynthConfig { embed_scale: 0.0, ..small() },
        ] {
            assert!(matches!(make_generator(&cfg), Err(Error::InvalidArgument(_))));
        }
    }
}
