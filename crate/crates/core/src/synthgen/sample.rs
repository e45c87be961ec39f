use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::generator::Generator;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Snapshots of one environment at t = 0..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvTrajectories {
    pub condition: String,
    /// per time: N × (d_ι + d_ν), columns ordered (z_ι, z_ν)
    pub latents: Vec<Matrix<f64>>,
    /// per time: N × p, row i = mixing(latents row i)
    pub observations: Vec<Matrix<f64>>,
    /// per time: trajectory id of each row; `None` for unpaired bundles
    pub trajectory_ids: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBundle {
    pub envs: Vec<EnvTrajectories>,
    pub horizon: usize,
    pub unpaired: bool,
    pub seed: u64,
}

/// Rolls every environment forward from the baseline innovation law.
///
/// The invariant chain does not depend on the environment, so it is drawn
/// once and shared: row i carries the same z_ι trajectory in every
/// environment. Responsive coordinates draw from a per-environment ChaCha
/// stream, independent of environment order.
pub fn sample_trajectories(
    gen: &Generator,
    n_cells: usize,
    horizon: usize,
    seed: u64,
    unpaired: bool,
) -> Result<TrajectoryBundle> {
    if n_cells == 0 {
        return Err(Error::InvalidArgument("n_cells must be ≥ 1".into()));
    }
    let (di, dn) = (gen.spec.d_iota, gen.spec.d_nu);
    let d = di + dn;
    let base = gen.bank.baseline();
    let sd_iota: Vec<f64> = gen.bank.var_iota.iter().map(|v| v.sqrt()).collect();
    let iota = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Matrix::zeros(n_cells, di);
        for i in 0..n_cells {
            for (k, v) in z.row_mut(i).iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = gen.bank.mu_iota[k] + sd_iota[k] * e;
            }
        }
        let mut out = vec![z];
        for _ in 1..=horizon {
            let prev = out.last().unwrap();
            let mut next = Matrix::zeros(n_cells, di);
            for i in 0..n_cells {
                let m = gen.spec.f_iota(prev.row(i));
                for (k, v) in next.row_mut(i).iter_mut().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v = m[k] + gen.bank.mu_iota[k] + sd_iota[k] * e;
                }
            }
            out.push(next);
        }
        out
    };
    let mut envs = Vec::with_capacity(gen.bank.environments.len());
    for (e_idx, env) in gen.bank.environments.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(e_idx as u64 + 1);
        let sd_nu: Vec<f64> = env.var_nu.iter().map(|v| v.sqrt()).collect();
        let sd0: Vec<f64> = base.var_nu.iter().map(|v| v.sqrt()).collect();
        let mut z = Matrix::zeros(n_cells, d);
        for i in 0..n_cells {
            let row = z.row_mut(i);
            row[..di].copy_from_slice(iota[0].row(i));
            for j in 0..dn {
                let e: f64 = StandardNormal.sample(&mut rng);
                row[di + j] = base.mu_nu[j] + sd0[j] * e;
            }
        }
        let mut latents = vec![z];
        for t in 1..=horizon {
            let prev = latents.last().unwrap();
            let mut next = Matrix::zeros(n_cells, d);
            for i in 0..n_cells {
                let zp = prev.row(i);
                let mean = gen.transition_mean(env, &zp[..di], &zp[di..]);
                let row = next.row_mut(i);
                row[..di].copy_from_slice(iota[t].row(i));
                for j in 0..dn {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    row[di + j] = mean[di + j] + sd_nu[j] * e;
                }
            }
            latents.push(next);
        }
        let mut ids: Vec<Vec<usize>> = vec![(0..n_cells).collect(); horizon + 1];
        if unpaired {
            for (t, z) in latents.iter_mut().enumerate() {
                ids[t].shuffle(&mut rng);
                *z = z.select_rows(&ids[t]);
            }
        }
        let observations = latents.iter().map(|z| gen.mixing.apply_rows(z)).collect();
        envs.push(EnvTrajectories {
            condition: env.id.clone(),
            latents,
            observations,
            trajectory_ids: if unpaired { None } else { Some(ids) },
        });
    }
    Ok(TrajectoryBundle {
        envs,
        horizon,
        unpaired,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_generator, SynthConfig};

    fn gen() -> Generator {
        make_generator(&SynthConfig::default()).unwrap()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn observations_are_the_mixed_latents() {
        let g = gen();
        let b = sample_trajectories(&g, 20, 3, 1, false).unwrap();
        assert_eq!(b.envs.len(), 10);
        for e in &b.envs {
            assert_eq!(e.latents.len(), 4);
            for (z, x) in e.latents.iter().zip(&e.observations) {
                assert_eq!(x.shape(), (20, 20));
                for i in 0..20 {
                    assert_eq!(x.row(i), &g.mixing.apply(z.row(i))[..]);
                }
            }
        }
    }

    #[test]
    fn invariant_chain_is_shared_across_environments() {
        let g = gen();
        let b = sample_trajectories(&g, 15, 3, 5, false).unwrap();
        for e in &b.envs[1..] {
            for (z, z0) in e.latents.iter().zip(&b.envs[0].latents) {
                assert_eq!(z.select_cols(&[0, 1]), z0.select_cols(&[0, 1]));
                assert_ne!(z.select_cols(&[2, 3, 4]), z0.select_cols(&[2, 3, 4]));
            }
        }
    }

    #[test]
    fn noiseless_fixed_point_is_constant_in_time() {
        let mut g = gen();
        g.spec.alpha = 1.0;
        g.spec.theta_iota = g.spec.theta_iota.map(|_| 0.0);
        g.spec.theta_nu = g.spec.theta_nu.map(|_| 0.0);
        g.spec.theta_nu_iota = g.spec.theta_nu_iota.map(|_| 0.0);
        g.bank.mu_iota.fill(0.0);
        g.bank.var_iota.fill(0.0);
        for e in &mut g.bank.environments {
            e.mu_nu.fill(0.0);
            e.var_nu.fill(0.0);
        }
        let b = sample_trajectories(&g, 10, 4, 2, false).unwrap();
        for e in &b.envs {
            for z in &e.latents {
                assert_eq!(z, &e.latents[0]);
            }
        }
    }

    #[test]
    fn unpaired_is_a_row_permutation_of_paired() {
        let g = gen();
        let p = sample_trajectories(&g, 30, 2, 3, false).unwrap();
        let u = sample_trajectories(&g, 30, 2, 3, true).unwrap();
        assert!(u.envs[0].trajectory_ids.is_none());
        let mut any_moved = false;
        for (ep, eu) in p.envs.iter().zip(&u.envs) {
            for (xp, xu) in ep.observations.iter().zip(&eu.observations) {
                let key = |m: &Matrix<f64>| {
                    let mut rows: Vec<Vec<u64>> =
                        (0..m.rows()).map(|i| m.row(i).iter().map(|v| v.to_bits()).collect()).collect();
                    rows.sort();
                    rows
                };
                assert_eq!(key(xp), key(xu));
                any_moved |= xp != xu;
            }
        }
        assert!(any_moved);
    }

    #[test]
    fn isolated_coordinate_forgets_its_parents() {
        let g = gen();
        let n = 10_000;
        let b = sample_trajectories(&g, n, 2, 4, false).unwrap();
        let se = 1.0 / (n as f64).sqrt();
        for j in 0..3 {
            let env = b.envs.iter().find(|e| e.condition == format!("iso_{}", j + 1)).unwrap();
            let now = env.latents[2].column(2 + j);
            for k in 0..5 {
                let before = env.latents[1].column(k);
                let r = pearson(&now, &before);
                assert!(r.abs() <= 3.0 * se, "iso_{} vs z{k}: {r}", j + 1);
            }
        }
    }

    #[test]
    fn second_moments_stay_bounded_over_fifty_steps() {
        let g = gen();
        let b = sample_trajectories(&g, 500, 50, 5, false).unwrap();
        for e in &b.envs {
            let m2 = |z: &Matrix<f64>| z.as_slice().iter().map(|v| v * v).sum::<f64>() / z.rows() as f64;
            let early = m2(&e.latents[5]);
            let late = m2(&e.latents[50]);
            assert!(late.is_finite() && late < 4.0 * early + 10.0, "{} {early} {late}", e.condition);
        }
    }

    #[test]
    fn innovations_are_serially_uncorrelated() {
        let g = gen();
        let n = 10_000;
        let b = sample_trajectories(&g, n, 3, 6, false).unwrap();
        let se = 1.0 / (n as f64).sqrt();
        let env_id = "shift_1";
        let env = g.bank.get(env_id).unwrap();
        let tr = b.envs.iter().find(|e| e.condition == env_id).unwrap();
        let resid = |t: usize| -> Matrix<f64> {
            let mut r = Matrix::zeros(n, 5);
            for i in 0..n {
                let zp = tr.latents[t - 1].row(i);
                let m = g.transition_mean(env, &zp[..2], &zp[2..]);
                for k in 0..5 {
                    r.set(i, k, tr.latents[t].get(i, k) - m[k]);
                }
            }
            r
        };
        let (r2, r3) = (resid(2), resid(3));
        for k in 0..5 {
            let c = pearson(&r2.column(k), &r3.column(k));
            assert!(c.abs() <= 3.0 * se, "coordinate {k}: {c}");
        }
    }

    #[test]
    fn seeded_and_environment_order_free() {
        let g = gen();
        let a = sample_trajectories(&g, 15, 2, 7, true).unwrap();
        assert_eq!(a, sample_trajectories(&g, 15, 2, 7, true).unwrap());
        let mut h = g.clone();
        h.bank.environments.truncate(4);
        let c = sample_trajectories(&h, 15, 2, 7, true).unwrap();
        assert_eq!(a.envs[3], c.envs[3]);
    }
}
