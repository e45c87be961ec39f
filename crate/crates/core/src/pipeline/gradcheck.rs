use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::derive_seed;
use crate::error::{Error, Result};
use crate::genmodel::{ModelConfig, ModelParams};
use crate::numcore::{finite_diff_check, BackwardFault, Matrix, Tape};
use crate::objective::{total_loss, total_loss_and_grad_on, AlignBatch, LossWeights, PairBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub d_iota: usize,
    pub d_nu: usize,
    pub p: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub seed: u64,
    /// central-difference step
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            d_iota: 2,
            d_nu: 3,
            p: 20,
            batch_size: 8,
            trials: 20,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.p == 0 || self.d_iota == 0 || self.d_nu == 0 {
            return Err(Error::InvalidArgument("dimensions and batch size must be ≥ 1".into()));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub hidden: usize,
    pub d_u: usize,
    pub n_conditions: usize,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: Vec<TrialReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> &TrialReport {
        self.trials
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one trial")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    let data = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(r, c, data).expect("sizes agree")
}

/// Checks every coordinate of the total-loss gradient against central
/// differences, once per random configuration. `fault` corrupts the
/// analytic backward pass.
pub fn run_gradcheck(cfg: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut trials = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[30, trial as u64]));
        let n_cond = rng.random_range(2..=4);
        let horizon = rng.random_range(1..=5);
        let mc = ModelConfig {
            d_iota: cfg.d_iota,
            d_nu: cfg.d_nu,
            p: cfg.p,
            d_u: rng.random_range(2..=6),
            hidden: rng.random_range(4..=12),
            horizon,
            conditions: (0..n_cond).map(|c| format!("c{c}")).collect(),
        };
        let mut params = ModelParams::init(mc.clone(), rng.random())?;
        // move off the zero-bias initialization
        let mut flat = params.flatten();
        for v in flat.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * e;
        }
        params.assign(&flat)?;
        let b = cfg.batch_size;
        let condition = mc.conditions[rng.random_range(1..n_cond)].clone();
        let time = rng.random_range(1..=horizon);
        let pair = PairBatch {
            x_prev: gaussian(&mut rng, b, cfg.p),
            x_curr: gaussian(&mut rng, b, cfg.p),
            condition: condition.clone(),
            time,
        };
        let align = AlignBatch {
            x_pert: gaussian(&mut rng, b, cfg.p),
            x_ctrl: gaussian(&mut rng, b, cfg.p),
            condition,
            time,
        };
        let weights = LossWeights {
            lambda_align: rng.random_range(0.1..2.0),
            lambda_reg: rng.random_range(0.001..0.1),
            ..LossWeights::default()
        };
        let noise = rng.random();
        let mut tape = Tape::new();
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let (_, grad) = total_loss_and_grad_on(&mut tape, &params, &pair, Some(&align), &weights, noise)?;
        let mut probe = params.clone();
        let fd = finite_diff_check(
            |x: &[f64]| {
                probe.assign(x)?;
                Ok(total_loss(&probe, &pair, Some(&align), &weights, noise)?.total)
            },
            &flat,
            &grad,
            cfg.step,
            None,
        )?;
        let worst_param = params
            .offsets()
            .into_iter()
            .find(|(_, r)| r.contains(&fd.worst_index))
            .map(|(n, r)| format!("{n}[{}]", fd.worst_index - r.start))
            .unwrap_or_default();
        trials.push(TrialReport {
            trial,
            hidden: mc.hidden,
            d_u: mc.d_u,
            n_conditions: n_cond,
            n_params: flat.len(),
            max_rel_error: fd.max_rel_error,
            worst_param,
            worst_index: fd.worst_index,
            analytic: fd.analytic_at_worst,
            numeric: fd.numeric_at_worst,
        });
    }
    let max_rel_error = trials.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        trials,
        max_rel_error,
        tolerance: cfg.tolerance,
        pass: max_rel_error <= cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_fault_is_caught() {
        let cfg = GradcheckConfig {
            p: 6,
            trials: 2,
            ..GradcheckConfig::default()
        };
        let ok = run_gradcheck(&cfg, None).unwrap();
        assert!(ok.pass, "{:?}", ok.worst());
        let bad = run_gradcheck(&cfg, Some(BackwardFault::FlipTanhSign)).unwrap();
        assert!(!bad.pass);
        assert!(!bad.worst().worst_param.is_empty());
        let zero = GradcheckConfig {
            trials: 0,
            ..GradcheckConfig::default()
        };
        assert!(run_gradcheck(&zero, None).is_err());
    }
}
