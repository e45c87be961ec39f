pub mod coupling;
pub mod dataio;
pub mod error;
pub mod evalsuite;
pub mod genmodel;
pub mod numcore;
pub mod objective;
pub mod pipeline;
pub mod synthgen;

pub use error::{Error, Result};

/// The numerical core is generic over the scalar; everything above it runs in f64.
pub type Mat = numcore::Matrix<f64>;
pub type Tape64 = numcore::Tape<f64>;
pub type Gaussian = genmodel::GaussianDiag<f64>;
