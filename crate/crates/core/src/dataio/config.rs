use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupling::{CouplingMethod, SinkhornConfig};
use crate::error::{Error, Result};
use crate::objective::LossWeights;

pub const SEED_ENV: &str = "CDYN_SEED";

/// Everything needed to reproduce a training run. Missing JSON fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_iota: usize,
    pub d_nu: usize,
    pub d_u: usize,
    pub hidden: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temporal_coupling: CouplingMethod,
    pub align_coupling: CouplingMethod,
    pub sinkhorn: SinkhornConfig,
    /// cells per side used when solving a transport problem
    pub ot_subsample: usize,
    pub seed: u64,
    /// `None` keeps every gene
    pub n_hvg: Option<usize>,
    /// DE top-count per (condition, time)
    pub k_de: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_iota: 2,
            d_nu: 3,
            d_u: 8,
            hidden: 64,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 200,
            temporal_coupling: CouplingMethod::Independent,
            align_coupling: CouplingMethod::Matched,
            sinkhorn: SinkhornConfig::default(),
            ot_subsample: 256,
            seed: 0,
            n_hvg: None,
            k_de: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_iota", self.d_iota),
            ("d_nu", self.d_nu),
            ("d_u", self.d_u),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("ot_subsample", self.ot_subsample),
            ("k_de", self.k_de),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be ≥ 1")));
            }
        }
        if self.n_hvg == Some(0) {
            return Err(Error::InvalidArgument("n_hvg must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(eps) = self.sinkhorn.epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::InvalidArgument(format!("sinkhorn epsilon must be positive, got {eps}")));
            }
        }
        if !(self.sinkhorn.tol > 0.0) || self.sinkhorn.max_iters == 0 {
            return Err(Error::InvalidArgument("sinkhorn tol and max_iters must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Applies a `CDYN_SEED` value (already read from the environment) over the file seed.
    pub fn apply_seed_override(&mut self, env_value: Option<&str>) -> Result<()> {
        if let Some(v) = env_value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}
