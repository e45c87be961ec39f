//! Dense numeric primitives, the differentiation tape, Adam and a
//! finite-difference gradient verifier. Generic over [`Scalar`].

mod adam;
mod fdcheck;
mod matrix;
mod scalar;
mod tape;

pub use adam::AdamState;
pub use fdcheck::{finite_diff_check, FdReport};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use tape::{value_and_grad, BackwardFault, NodeId, Tape, LEAKY_SLOPE};
