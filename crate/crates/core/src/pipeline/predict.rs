use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::ConditionInfo;
use crate::error::{Error, Result};
use crate::genmodel::{decode_batch, encode_batch, ModelParams, TransitionLaw};
use crate::numcore::Matrix;

/// Posterior means (z_ι, z_ν) of the rows of `x`.
pub fn encode_means(params: &ModelParams, x: &Matrix<f64>, condition: &str, time: usize) -> Result<Matrix<f64>> {
    let c = params.config.condition_index(condition)?;
    Ok(encode_batch(params, x, c, time)?.mean())
}

/// Samples `z^{t+1}, …, z^{t+horizon}` from the law, starting at the rows of `z0`.
pub fn rollout_latent<L: TransitionLaw + ?Sized>(
    law: &L,
    z0: &Matrix<f64>,
    condition: &str,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Matrix<f64>>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(horizon);
    let mut z = z0.clone();
    for _ in 0..horizon {
        let (mean, logvar) = law.transition_rows(&z, condition)?;
        let mut next = mean;
        for (v, lv) in next.as_mut_slice().iter_mut().zip(logvar.as_slice()) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += (0.5 * lv).exp() * e;
        }
        out.push(next.clone());
        z = next;
    }
    Ok(out)
}

/// Which embedding a prediction used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingChoice {
    pub requested: String,
    pub used: String,
    /// true when `used` stands in for a condition the model never saw
    pub fallback: bool,
}

/// Resolves `condition` against the model vocabulary. Unseen conditions map
/// to the seen condition whose target set has the smallest symmetric
/// difference (earliest vocabulary entry on ties).
pub fn resolve_embedding(
    vocabulary: &[String],
    manifest: &[ConditionInfo],
    condition: &str,
    targets: Option<&[String]>,
) -> Result<EmbeddingChoice> {
    if vocabulary.iter().any(|c| c == condition) {
        return Ok(EmbeddingChoice {
            requested: condition.into(),
            used: condition.into(),
            fallback: false,
        });
    }
    let targets: BTreeSet<&String> = match targets {
        Some(t) => t.iter().collect(),
        None => manifest
            .iter()
            .find(|c| c.id == condition)
            .ok_or_else(|| Error::UnknownCondition(condition.to_string()))?
            .targets
            .iter()
            .collect(),
    };
    let mut best: Option<(usize, &String)> = None;
    for id in vocabulary {
        let Some(info) = manifest.iter().find(|c| &c.id == id) else { continue };
        let other: BTreeSet<&String> = info.targets.iter().collect();
        let d = targets.symmetric_difference(&other).count();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, id));
        }
    }
    let (_, used) = best.ok_or_else(|| {
        Error::UnknownCondition(format!("{condition} (no seen condition has a target specification)"))
    })?;
    Ok(EmbeddingChoice {
        requested: condition.into(),
        used: used.clone(),
        fallback: true,
    })
}

/// Encodes `x_start` (observed at ordinal time `start`) and decodes a
/// sampled rollout; element k holds the predicted cells at `start + k + 1`.
pub fn predict_cells(
    params: &ModelParams,
    x_start: &Matrix<f64>,
    start: usize,
    embedding: &str,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Matrix<f64>>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be ≥ 1".into()));
    }
    let z0 = encode_means(params, x_start, embedding, start)?;
    rollout_latent(params, &z0, embedding, horizon, seed)?
        .iter()
        .map(|z| decode_batch(params, z))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::pseudobulk;
    use crate::genmodel::ModelConfig;
    use crate::synthgen::{make_generator, sample_trajectories, SynthConfig};

    fn params() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                d_iota: 2,
                d_nu: 3,
                p: 6,
                d_u: 3,
                hidden: 8,
                horizon: 4,
                conditions: vec!["ctrl".into(), "a".into()],
            },
            1,
        )
        .unwrap()
    }

    fn x(n: usize) -> Matrix<f64> {
        Matrix::from_vec(n, 6, (0..n * 6).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn horizon_one_gives_finite_cells() {
        let out = predict_cells(&params(), &x(7), 0, "a", 1, 0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), (7, 6));
        assert!(out[0].is_finite());
        assert_eq!(pseudobulk(&out[0], &(0..7).collect::<Vec<_>>()).len(), 6);
        assert!(predict_cells(&params(), &x(7), 0, "a", 0, 0).is_err());
    }

    #[test]
    fn collapsed_variances_make_rollouts_seed_free() {
        let mut p = params();
        // logvar halves of every prior output bias pushed far below exp underflow
        for name in ["inv_trans.b3", "resp_trans.b3"] {
            let b = p.get_mut(name).unwrap();
            let w = b.cols();
            for c in w / 2..w {
                b.set(0, c, -1e4);
            }
        }
        let a = predict_cells(&p, &x(5), 1, "a", 3, 1).unwrap();
        let b = predict_cells(&p, &x(5), 1, "a", 3, 2).unwrap();
        assert_eq!(a, b);
        let c = predict_cells(&params(), &x(5), 1, "a", 3, 1).unwrap();
        let d = predict_cells(&params(), &x(5), 1, "a", 3, 2).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn generator_as_model_matches_its_own_samples() {
        let cfg = SynthConfig {
            n_cells: 4000,
            horizon: 2,
            seed: 3,
            ..SynthConfig::default()
        };
        let gen = make_generator(&cfg).unwrap();
        let bundle = sample_trajectories(&gen, cfg.n_cells, cfg.horizon, 9, false).unwrap();
        for env in &bundle.envs {
            let z = rollout_latent(&gen, &env.latents[0], &env.condition, 2, 77).unwrap();
            for k in 0..2 {
                let pred = gen.mixing.apply_rows(&z[k]);
                let obs = &env.observations[k + 1];
                let n = obs.rows() as f64;
                let rows: Vec<usize> = (0..obs.rows()).collect();
                let (mp, mo) = (pseudobulk(&pred, &rows), pseudobulk(obs, &rows));
                for g in 0..obs.cols() {
                    let col = obs.column(g);
                    let var = col.iter().map(|v| (v - mo[g]).powi(2)).sum::<f64>() / (n - 1.0);
                    // difference of two independent means: sd = sqrt(2 var / n)
                    let se = (2.0 * var / n).sqrt();
                    assert!((mp[g] - mo[g]).abs() <= 4.5 * se + 1e-12, "{} t{} gene {g}", env.condition, k + 1);
                }
            }
        }
    }

    #[test]
    fn unseen_conditions_fall_back_to_nearest_targets() {
        let info = |id: &str, t: &[&str]| ConditionInfo {
            id: id.into(),
            targets: t.iter().map(|s| s.to_string()).collect(),
            is_control: t.is_empty(),
        };
        let manifest = vec![info("ctrl", &[]), info("a", &["g1"]), info("b", &["g1", "g2"]), info("c", &["g3"])];
        let vocab = vec!["ctrl".to_string(), "a".into(), "b".into()];
        let seen = resolve_embedding(&vocab, &manifest, "b", None).unwrap();
        assert!(!seen.fallback);
        let c = resolve_embedding(&vocab, &manifest, "c", None).unwrap();
        // {g3} is 1 away from ctrl, 2 from a, 3 from b
        assert_eq!((c.used.as_str(), c.fallback), ("ctrl", true));
        let spec = vec!["g2".to_string()];
        assert_eq!(resolve_embedding(&vocab, &manifest, "new", Some(&spec)).unwrap().used, "ctrl");
        let spec = vec!["g2".to_string(), "g1".into(), "g4".into()];
        assert_eq!(resolve_embedding(&vocab, &manifest, "new", Some(&spec)).unwrap().used, "b");
        assert!(resolve_embedding(&vocab, &manifest, "zzz", None).is_err());
    }
}
