//! Training loss: temporal ELBO over pseudo-paired snapshots, invariant
//! alignment, adjacency sparsity, and their weighted total.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{
    adjacency_nodes, decode_nodes, encode_invariant_nodes, encode_responsive_nodes, kl_on_tape,
    reparam_on_tape, transition_prior_nodes, BoundParams, GaussianNodes, ModelParams,
};
use crate::numcore::{Matrix, NodeId, Tape};

/// Pseudo-pairs `(x^{t−1}, x^t)` of one condition; row i of `x_prev` precedes row i of `x_curr`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_prev: Matrix<f64>,
    pub x_curr: Matrix<f64>,
    pub condition: String,
    /// time index of `x_curr`
    pub time: usize,
}

/// Perturbed and control cells at the same time, paired row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignBatch {
    pub x_pert: Matrix<f64>,
    pub x_ctrl: Matrix<f64>,
    pub condition: String,
    pub time: usize,
}

/// Per-step loss breakdown. Reconstruction and KL terms are stored as losses
/// (positive), so `neg_elbo = recon_prev + recon_curr + kl_transition + prior_kl_weight·prior_kl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub neg_elbo: f64,
    pub recon_prev: f64,
    pub recon_curr: f64,
    pub kl_transition: f64,
    pub prior_kl: f64,
    pub align: f64,
    pub sparsity: f64,
}

/// Weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_reg: f64,
    /// weight of KL(q(z^{t−1}|x^{t−1}) ‖ N(0, I)); absent from the bound itself
    pub prior_kl_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_align: 1.0,
            lambda_reg: 0.01,
            prior_kl_weight: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_align", self.lambda_align),
            ("lambda_reg", self.lambda_reg),
            ("prior_kl_weight", self.prior_kl_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Temporal-ELBO terms of one pair batch (batch means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `L_temp = −(recon_prev + recon_curr + kl_transition)`
    pub elbo: f64,
    pub recon_prev: f64,
    pub recon_curr: f64,
    pub kl_transition: f64,
    pub prior_kl: f64,
}

struct ElboNodes {
    recon_prev: NodeId,
    recon_curr: NodeId,
    kl: NodeId,
    prior_kl: NodeId,
}

fn check_batch(params: &ModelParams, x: &Matrix<f64>, what: &str) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if x.cols() != params.config.p {
        return Err(Error::Dimension(format!(
            "{what} has {} genes, model expects {}",
            x.cols(),
            params.config.p
        )));
    }
    Ok(())
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn join(tape: &mut Tape<f64>, a: GaussianNodes, b: GaussianNodes) -> Result<GaussianNodes> {
    Ok(GaussianNodes {
        mean: tape.concat(&[a.mean, b.mean])?,
        logvar: tape.concat(&[a.logvar, b.logvar])?,
    })
}

/// Full posterior `q(z_ι|x) · q(z_ν|x,u,t)` for a batch.
fn posterior(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    x: NodeId,
    condition: usize,
    time: usize,
) -> Result<GaussianNodes> {
    let qi = encode_invariant_nodes(tape, params, bound, x)?;
    let qn = encode_responsive_nodes(tape, params, bound, x, condition, time)?;
    join(tape, qi, qn)
}

/// `½‖x − g(z)‖²` averaged over rows.
fn recon_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    x: NodeId,
    z: NodeId,
    rows: usize,
) -> Result<NodeId> {
    let xr = decode_nodes(tape, params, bound, z)?;
    let r = tape.sub(x, xr)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 0.5 / rows as f64)
}

fn elbo_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    batch: &PairBatch,
    seed: u64,
) -> Result<ElboNodes> {
    check_batch(params, &batch.x_prev, "x_prev")?;
    check_batch(params, &batch.x_curr, "x_curr")?;
    let b = batch.x_prev.rows();
    if batch.x_curr.rows() != b {
        return Err(Error::Dimension(format!(
            "pair batch has {b} predecessors for {} cells",
            batch.x_curr.rows()
        )));
    }
    if batch.time == 0 {
        return Err(Error::InvalidArgument("pair batch at time 0 has no predecessor".into()));
    }
    let c = params.config.condition_index(&batch.condition)?;
    let d = params.config.d_latent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps_prev = tape.constant(standard_normal(&mut rng, b, d))?;
    let eps_curr = tape.constant(standard_normal(&mut rng, b, d))?;

    let x_prev = tape.constant(batch.x_prev.clone())?;
    let x_curr = tape.constant(batch.x_curr.clone())?;
    let q_prev = posterior(tape, params, bound, x_prev, c, batch.time - 1)?;
    let q_curr = posterior(tape, params, bound, x_curr, c, batch.time)?;
    let z_prev = reparam_on_tape(tape, q_prev, eps_prev)?;
    let z_curr = reparam_on_tape(tape, q_curr, eps_curr)?;

    let recon_prev = recon_nodes(tape, params, bound, x_prev, z_prev, b)?;
    let recon_curr = recon_nodes(tape, params, bound, x_curr, z_curr, b)?;

    let prior = transition_prior_nodes(tape, params, bound, z_prev, c)?;
    let p_full = join(tape, prior.iota, prior.nu)?;
    let kl = kl_on_tape(tape, q_curr, p_full)?;
    let kl = tape.scale(kl, 1.0 / b as f64)?;

    let zero = tape.constant(Matrix::zeros(b, d))?;
    let standard = GaussianNodes {
        mean: zero,
        logvar: zero,
    };
    let prior_kl = kl_on_tape(tape, q_prev, standard)?;
    let prior_kl = tape.scale(prior_kl, 1.0 / b as f64)?;
    Ok(ElboNodes {
        recon_prev,
        recon_curr,
        kl,
        prior_kl,
    })
}

fn align_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    batch: &AlignBatch,
) -> Result<NodeId> {
    check_batch(params, &batch.x_pert, "x_pert")?;
    check_batch(params, &batch.x_ctrl, "x_ctrl")?;
    let b = batch.x_pert.rows();
    if batch.x_ctrl.rows() != b {
        return Err(Error::Dimension(format!(
            "align batch pairs {b} perturbed with {} control cells",
            batch.x_ctrl.rows()
        )));
    }
    let xp = tape.constant(batch.x_pert.clone())?;
    let xc = tape.constant(batch.x_ctrl.clone())?;
    let mp = encode_invariant_nodes(tape, params, bound, xp)?.mean;
    let mc = encode_invariant_nodes(tape, params, bound, xc)?.mean;
    let d = tape.sub(mp, mc)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / b as f64)
}

fn sparsity_nodes(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    conditions: &[&str],
) -> Result<NodeId> {
    let distinct: BTreeSet<usize> = conditions
        .iter()
        .map(|c| params.config.condition_index(c))
        .collect::<Result<_>>()?;
    let mut acc = tape.constant_scalar(0.0)?;
    for c in distinct {
        let w = adjacency_nodes(tape, params, bound, c)?;
        // |w| = w · sign(w), with sign(0) = 0 as the subgradient
        let sign = tape.value(w).map(f64::signum_or_zero);
        let sign = tape.constant(sign)?;
        let abs = tape.mul(w, sign)?;
        let l1 = tape.sum(abs)?;
        acc = tape.add(acc, l1)?;
    }
    Ok(acc)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

fn evaluate<T>(params: &ModelParams, f: impl FnOnce(&mut Tape<f64>, &BoundParams) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    f(&mut tape, &bound)
}

/// Temporal ELBO of one pair batch with a single reparameterized sample per time.
pub fn temporal_elbo(params: &ModelParams, batch: &PairBatch, seed: u64) -> Result<ElboTerms> {
    evaluate(params, |tape, bound| {
        let n = elbo_nodes(tape, params, bound, batch, seed)?;
        let (rp, rc, kl) = (tape.scalar(n.recon_prev), tape.scalar(n.recon_curr), tape.scalar(n.kl));
        Ok(ElboTerms {
            elbo: -(rp + rc + kl),
            recon_prev: rp,
            recon_curr: rc,
            kl_transition: kl,
            prior_kl: tape.scalar(n.prior_kl),
        })
    })
}

/// Mean squared distance between invariant-encoder means of paired rows.
pub fn alignment_loss(params: &ModelParams, batch: &AlignBatch) -> Result<f64> {
    evaluate(params, |tape, bound| {
        let a = align_nodes(tape, params, bound, batch)?;
        Ok(tape.scalar(a))
    })
}

/// Σ over distinct conditions of the entrywise L1 norm of their adjacency.
pub fn sparsity_loss(params: &ModelParams, conditions: &[&str]) -> Result<f64> {
    evaluate(params, |tape, bound| {
        let s = sparsity_nodes(tape, params, bound, conditions)?;
        Ok(tape.scalar(s))
    })
}

struct Recorded {
    loss: NodeId,
    report: LossReport,
}

fn record(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    bound: &BoundParams,
    pair: &PairBatch,
    align: Option<&AlignBatch>,
    weights: &LossWeights,
    seed: u64,
) -> Result<Recorded> {
    weights.validate()?;
    if let Some(a) = align {
        if a.condition != pair.condition {
            return Err(Error::InvalidArgument(format!(
                "align batch condition `{}` differs from pair batch condition `{}`",
                a.condition, pair.condition
            )));
        }
    }
    let e = elbo_nodes(tape, params, bound, pair, seed)?;
    let mut neg_elbo = tape.add(e.recon_prev, e.recon_curr)?;
    neg_elbo = tape.add(neg_elbo, e.kl)?;
    if weights.prior_kl_weight != 0.0 {
        let w = tape.scale(e.prior_kl, weights.prior_kl_weight)?;
        neg_elbo = tape.add(neg_elbo, w)?;
    }
    let align_node = match align {
        Some(a) => Some(align_nodes(tape, params, bound, a)?),
        None => None,
    };
    let sparse = sparsity_nodes(tape, params, bound, &[pair.condition.as_str()])?;

    let mut loss = neg_elbo;
    if let Some(a) = align_node {
        let w = tape.scale(a, weights.lambda_align)?;
        loss = tape.add(loss, w)?;
    }
    let w = tape.scale(sparse, weights.lambda_reg)?;
    loss = tape.add(loss, w)?;

    let neg = tape.scalar(neg_elbo);
    let align_v = align_node.map_or(0.0, |a| tape.scalar(a));
    let sparse_v = tape.scalar(sparse);
    let report = LossReport {
        total: neg + weights.lambda_align * align_v + weights.lambda_reg * sparse_v,
        neg_elbo: neg,
        recon_prev: tape.scalar(e.recon_prev),
        recon_curr: tape.scalar(e.recon_curr),
        kl_transition: tape.scalar(e.kl),
        prior_kl: tape.scalar(e.prior_kl),
        align: align_v,
        sparsity: sparse_v,
    };
    Ok(Recorded { loss, report })
}

/// `total = −L_temp + λ_align·L_align + λ_reg·L_reg` for one step's batches.
pub fn total_loss(
    params: &ModelParams,
    pair: &PairBatch,
    align: Option<&AlignBatch>,
    weights: &LossWeights,
    seed: u64,
) -> Result<LossReport> {
    evaluate(params, |tape, bound| {
        Ok(record(tape, params, bound, pair, align, weights, seed)?.report)
    })
}

/// [`total_loss`] together with its gradient in [`ModelParams::flatten`] order.
pub fn total_loss_and_grad(
    params: &ModelParams,
    pair: &PairBatch,
    align: Option<&AlignBatch>,
    weights: &LossWeights,
    seed: u64,
) -> Result<(LossReport, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true)?;
    let r = record(&mut tape, params, &bound, pair, align, weights, seed)?;
    let grad = tape.backward(r.loss)?;
    Ok((r.report, grad))
}

/// Same as [`total_loss_and_grad`] on a caller-prepared tape, for fault injection.
pub fn total_loss_and_grad_on(
    tape: &mut Tape<f64>,
    params: &ModelParams,
    pair: &PairBatch,
    align: Option<&AlignBatch>,
    weights: &LossWeights,
    seed: u64,
) -> Result<(LossReport, Vec<f64>)> {
    let bound = params.bind(tape, true)?;
    let r = record(tape, params, &bound, pair, align, weights, seed)?;
    let grad = tape.backward(r.loss)?;
    Ok((r.report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::ModelConfig;
    use crate::numcore::finite_diff_check;

    fn config() -> ModelConfig {
        ModelConfig {
            d_iota: 2,
            d_nu: 3,
            p: 5,
            d_u: 2,
            hidden: 4,
            horizon: 3,
            conditions: vec!["ctrl".into(), "ko".into()],
        }
    }

    fn data(rows: usize, shift: f64) -> Matrix<f64> {
        let v = (0..rows * 5).map(|i| ((i as f64) * 0.7 + shift).sin()).collect();
        Matrix::from_vec(rows, 5, v).unwrap()
    }

    fn pair() -> PairBatch {
        PairBatch {
            x_prev: data(4, 0.0),
            x_curr: data(4, 1.0),
            condition: "ko".into(),
            time: 2,
        }
    }

    fn align() -> AlignBatch {
        AlignBatch {
            x_pert: data(3, 2.0),
            x_ctrl: data(3, 3.0),
            condition: "ko".into(),
            time: 2,
        }
    }

    fn params(seed: u64) -> ModelParams {
        let mut p = ModelParams::init(config(), seed).unwrap();
        p.get_mut("adj.base").unwrap().as_mut_slice().fill(0.3);
        p
    }

    #[test]
    fn perfect_autoencoder_fixture_has_zero_loss() {
        // zero data, zero networks, posteriors and priors pinned at variance e^-80
        let mut p = ModelParams::zeros(config()).unwrap();
        for name in ["inv_enc.b3", "resp_enc.b3"] {
            let b = p.get_mut(name).unwrap();
            let half = b.cols() / 2;
            for j in half..b.cols() {
                b.set(0, j, -80.0);
            }
        }
        p.get_mut("inv_trans.b3").unwrap().set(0, 2, -80.0);
        p.get_mut("inv_trans.b3").unwrap().set(0, 3, -80.0);
        p.get_mut("resp_trans.b3").unwrap().set(0, 1, -80.0);
        let batch = PairBatch {
            x_prev: Matrix::zeros(3, 5),
            x_curr: Matrix::zeros(3, 5),
            condition: "ko".into(),
            time: 1,
        };
        let t = temporal_elbo(&p, &batch, 1).unwrap();
        assert!(t.recon_prev < 1e-30 && t.recon_curr < 1e-30, "{t:?}");
        assert!(t.kl_transition.abs() < 1e-12, "{t:?}");
    }

    #[test]
    fn duplicated_rows_keep_the_batch_mean() {
        let p = params(1);
        let base = PairBatch {
            x_prev: Matrix::zeros(1, 5),
            x_curr: data(1, 0.5),
            condition: "ko".into(),
            time: 1,
        };
        let doubled = PairBatch {
            x_prev: Matrix::vcat(&[&base.x_prev, &base.x_prev]).unwrap(),
            x_curr: Matrix::vcat(&[&base.x_curr, &base.x_curr]).unwrap(),
            ..base.clone()
        };
        // collapse sampling noise so both batches see the same latent
        let mut q = p.clone();
        for name in ["inv_enc.b3", "resp_enc.b3"] {
            let b = q.get_mut(name).unwrap();
            let half = b.cols() / 2;
            for j in half..b.cols() {
                b.set(0, j, -60.0);
            }
        }
        let a = temporal_elbo(&q, &base, 3).unwrap();
        let b = temporal_elbo(&q, &doubled, 3).unwrap();
        assert!((a.elbo - b.elbo).abs() < 1e-9 * a.elbo.abs().max(1.0), "{a:?} {b:?}");
    }

    #[test]
    fn alignment_special_cases() {
        let p = params(2);
        let same = AlignBatch {
            x_ctrl: data(3, 2.0),
            ..align()
        };
        assert_eq!(alignment_loss(&p, &same).unwrap(), 0.0);
        assert!(alignment_loss(&p, &align()).unwrap() > 0.0);
        let z = ModelParams::zeros(config()).unwrap();
        assert_eq!(alignment_loss(&z, &align()).unwrap(), 0.0);
        let empty = AlignBatch {
            x_pert: Matrix::zeros(0, 5),
            x_ctrl: Matrix::zeros(0, 5),
            ..align()
        };
        assert!(matches!(alignment_loss(&p, &empty), Err(Error::EmptyBatch)));
    }

    #[test]
    fn sparsity_hand_case() {
        // entries 0.5 and −0.25 below the diagonal, tanh inverted through the base
        let mut p = ModelParams::zeros(config()).unwrap();
        let base = p.get_mut("adj.base").unwrap();
        base.set(0, 3, 0.5f64.atanh());
        base.set(0, 7, (-0.25f64).atanh());
        base.set(0, 1, 3.0); // upper triangle, masked
        let l = sparsity_loss(&p, &["ko", "ko"]).unwrap();
        assert!((l - 0.75).abs() < 1e-15, "{l}");
        assert!((sparsity_loss(&p, &["ko", "ctrl"]).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(sparsity_loss(&ModelParams::zeros(config()).unwrap(), &["ko"]).unwrap(), 0.0);
        assert!(sparsity_loss(&p, &["nope"]).is_err());
    }

    #[test]
    fn scaling_the_base_never_decreases_sparsity() {
        let p0 = params(4);
        let mut prev = -1.0;
        for k in 0..100 {
            let mut p = p0.clone();
            let scale = 1.0 + k as f64 * 0.1;
            p.get_mut("adj.base").unwrap().as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| {
                *v = scale * (0.2 + 0.1 * i as f64);
            });
            p.get_mut("adj.mod").unwrap().as_mut_slice().fill(0.0);
            let l = sparsity_loss(&p, &["ko"]).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn report_identity_and_weight_additivity() {
        let p = params(5);
        let w = LossWeights::default();
        let r = total_loss(&p, &pair(), Some(&align()), &w, 9).unwrap();
        assert_eq!(r.total, r.neg_elbo + w.lambda_align * r.align + w.lambda_reg * r.sparsity);
        assert_eq!(r.neg_elbo, r.recon_prev + r.recon_curr + r.kl_transition);
        let none = LossWeights {
            lambda_align: 0.0,
            lambda_reg: 0.0,
            ..w
        };
        let r0 = total_loss(&p, &pair(), Some(&align()), &none, 9).unwrap();
        assert_eq!(r0.total, r0.neg_elbo);
        let elbo = temporal_elbo(&p, &pair(), 9).unwrap();
        assert_eq!(r0.total, -elbo.elbo);
        let no_align = LossWeights {
            lambda_align: 0.0,
            ..w
        };
        let ra = total_loss(&p, &pair(), Some(&align()), &no_align, 9).unwrap();
        assert!((r.total - ra.total - w.lambda_align * r.align).abs() < 1e-12);
        let heavy = LossWeights {
            lambda_reg: 1e6,
            ..w
        };
        let rh = total_loss(&p, &pair(), Some(&align()), &heavy, 9).unwrap();
        assert!(rh.total >= 1e6 * rh.sparsity * 0.99);
    }

    #[test]
    fn deterministic_given_seed() {
        let p = params(6);
        let w = LossWeights::default();
        let a = total_loss(&p, &pair(), Some(&align()), &w, 4).unwrap();
        assert_eq!(a, total_loss(&p, &pair(), Some(&align()), &w, 4).unwrap());
        assert_ne!(a, total_loss(&p, &pair(), Some(&align()), &w, 5).unwrap());
    }

    #[test]
    fn rejects_inconsistent_batches() {
        let p = params(7);
        let w = LossWeights::default();
        let mut b = pair();
        b.time = 0;
        assert!(total_loss(&p, &b, None, &w, 0).is_err());
        let mut a = align();
        a.condition = "ctrl".into();
        assert!(total_loss(&p, &pair(), Some(&a), &w, 0).is_err());
        let mut b = pair();
        b.x_curr = data(3, 1.0);
        assert!(matches!(total_loss(&p, &b, None, &w, 0), Err(Error::Dimension(_))));
        let bad = LossWeights {
            lambda_reg: -1.0,
            ..w
        };
        assert!(total_loss(&p, &pair(), None, &bad, 0).is_err());
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let p = params(8);
        let w = LossWeights {
            prior_kl_weight: 0.5,
            ..LossWeights::default()
        };
        let (r, g) = total_loss_and_grad(&p, &pair(), Some(&align()), &w, 11).unwrap();
        assert_eq!(r, total_loss(&p, &pair(), Some(&align()), &w, 11).unwrap());
        let report = finite_diff_check(
            |flat: &[f64]| {
                let mut q = p.clone();
                q.assign(flat)?;
                Ok(total_loss(&q, &pair(), Some(&align()), &w, 11)?.total)
            },
            &p.flatten(),
            &g,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
