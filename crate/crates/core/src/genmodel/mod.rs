//! Generative model: diagonal-Gaussian posteriors, decoder, condition-gated
//! transition priors and the transition score difference.

mod gaussian;
mod model;
mod params;

pub use gaussian::{kl_diag_gaussian, kl_on_tape, reparam_on_tape, reparam_sample, GaussianDiag, GaussianNodes};
pub use model::{
    adjacency_nodes, build_condition_adjacency, condition_embedding_node, decode, decode_batch,
    decode_nodes, encode_batch, encode_invariant, encode_invariant_nodes, encode_responsive,
    encode_responsive_nodes, mlp_nodes, prior_batch, transition_prior, transition_prior_nodes,
    AdjacencyW, EncodedBatch, LatentState, PriorNodes,
};
pub use params::{BoundParams, MlpNodes, ModelConfig, ModelParams};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Anything that assigns a diagonal-Gaussian law to `z^t` given `z^{t−1}` and a condition.
pub trait TransitionLaw {
    fn d_iota(&self) -> usize;

    /// Law over the full latent (z_ι, z_ν) at time t.
    fn transition(&self, z_prev: &LatentState, condition: &str) -> Result<GaussianDiag<f64>>;

    /// Row-wise mean and log-variance for a batch of previous states.
    fn transition_rows(&self, z_prev: &Matrix<f64>, condition: &str) -> Result<(Matrix<f64>, Matrix<f64>)> {
        let di = self.d_iota();
        let mut mean = Matrix::zeros(z_prev.rows(), z_prev.cols());
        let mut logvar = Matrix::zeros(z_prev.rows(), z_prev.cols());
        for r in 0..z_prev.rows() {
            let g = self.transition(&LatentState::split(z_prev.row(r), di), condition)?;
            if g.len() != z_prev.cols() {
                return Err(Error::Dimension(format!("law has {} coordinates, state {}", g.len(), z_prev.cols())));
            }
            mean.row_mut(r).copy_from_slice(&g.mean);
            logvar.row_mut(r).copy_from_slice(&g.logvar);
        }
        Ok((mean, logvar))
    }
}

impl TransitionLaw for ModelParams {
    fn d_iota(&self) -> usize {
        self.config.d_iota
    }

    fn transition(&self, z_prev: &LatentState, condition: &str) -> Result<GaussianDiag<f64>> {
        let (mut qi, qn) = transition_prior(self, z_prev, condition)?;
        qi.mean.extend(qn.mean);
        qi.logvar.extend(qn.logvar);
        Ok(qi)
    }

    fn transition_rows(&self, z_prev: &Matrix<f64>, condition: &str) -> Result<(Matrix<f64>, Matrix<f64>)> {
        prior_batch(self, z_prev, self.config.condition_index(condition)?)
    }
}

/// Score difference split into its invariant and responsive blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDiff {
    pub iota: Vec<f64>,
    pub nu: Vec<f64>,
}

impl ScoreDiff {
    pub fn iota_norm(&self) -> f64 {
        self.iota.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn nu_norm(&self) -> f64 {
        self.nu.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `∇_{z^t} log p(z^t | z^{t−1}, u_m) − ∇_{z^t} log p(z^t | z^{t−1}, u_0)`.
pub fn transition_score_diff<L: TransitionLaw + ?Sized>(
    law: &L,
    z_t: &LatentState,
    z_prev: &LatentState,
    env: &str,
    baseline: &str,
) -> Result<ScoreDiff> {
    let pm = law.transition(z_prev, env)?;
    let p0 = law.transition(z_prev, baseline)?;
    let z = z_t.concat();
    if z.len() != pm.len() {
        return Err(Error::Dimension(format!(
            "z_t has {} coordinates, transition law {}",
            z.len(),
            pm.len()
        )));
    }
    let sm = pm.score(&z);
    let s0 = p0.score(&z);
    let diff: Vec<f64> = sm.iter().zip(&s0).map(|(a, b)| a - b).collect();
    let di = law.d_iota();
    Ok(ScoreDiff {
        iota: diff[..di].to_vec(),
        nu: diff[di..].to_vec(),
    })
}
