//! Synthetic temporal interventional data with known latents.
//!
//! Latent dynamics follow a first-order Markov SCM with an invariant block
//! `z_ι^t = α z_ι^{t−1} + (1−α) tanh(Θ_ι z_ι^{t−1}) + n_ι` and a responsive block
//! `z_{ν,j}^t = tanh(Σ_k θ_jk z_k^{t−1}) + n_{ν,j}` whose innovation moments
//! depend on the environment. Observations are an injective leaky-relu mixing.

mod export;
mod generator;
mod sample;

pub use export::{bundle_to_dataset, export_dataset, load_latents_truth, ExportSummary, Manifest, LATENTS_DIR, MANIFEST_FILE};
pub use generator::{
    check_rank_condition, delta_eta, make_generator, numerical_rank, EnvKind, Environment,
    EnvironmentBank, Generator, GeneratorSpec, Mixing, RankCheck, SynthConfig,
};
pub use sample::{sample_trajectories, EnvTrajectories, TrajectoryBundle};
