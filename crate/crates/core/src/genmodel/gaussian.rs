use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{NodeId, Scalar, Tape};

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiag<T> {
    pub mean: Vec<T>,
    pub logvar: Vec<T>,
}

impl<T: Scalar> GaussianDiag<T> {
    pub fn new(mean: Vec<T>, logvar: Vec<T>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::Dimension(format!(
                "gaussian mean has {} entries, logvar {}",
                mean.len(),
                logvar.len()
            )));
        }
        if mean.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("gaussian parameters must be finite".into()));
        }
        Ok(GaussianDiag { mean, logvar })
    }

    pub fn standard(d: usize) -> Self {
        GaussianDiag {
            mean: vec![T::zero(); d],
            logvar: vec![T::zero(); d],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self) -> Vec<T> {
        self.logvar.iter().map(|l| l.exp()).collect()
    }

    /// `∇_z log N(z; mean, exp(logvar))`, coordinatewise.
    pub fn score(&self, z: &[T]) -> Vec<T> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.logvar)
            .map(|((&z, &m), &l)| -(z - m) / l.exp())
            .collect()
    }
}

/// `mean + exp(logvar / 2) ⊙ noise`.
pub fn reparam_sample<T: Scalar>(q: &GaussianDiag<T>, noise: &[T]) -> Result<Vec<T>> {
    if noise.len() != q.len() {
        return Err(Error::Dimension(format!(
            "noise has {} entries for a {}-dimensional gaussian",
            noise.len(),
            q.len()
        )));
    }
    let half = T::lit(0.5);
    Ok(q.mean
        .iter()
        .zip(&q.logvar)
        .zip(noise)
        .map(|((&m, &l), &e)| m + (half * l).exp() * e)
        .collect())
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians, in nats.
pub fn kl_diag_gaussian<T: Scalar>(q: &GaussianDiag<T>, p: &GaussianDiag<T>) -> Result<T> {
    if q.len() != p.len() {
        return Err(Error::Dimension(format!(
            "kl between {}- and {}-dimensional gaussians",
            q.len(),
            p.len()
        )));
    }
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for i in 0..q.len() {
        let (mq, lq, mp, lp) = (q.mean[i], q.logvar[i], p.mean[i], p.logvar[i]);
        let d = mq - mp;
        acc += half * ((lq - lp).exp() + d * d * (-lp).exp() - T::one() + lp - lq);
    }
    Ok(acc)
}

/// Mean and log-variance nodes of a batch of diagonal Gaussians (one per row).
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mean: NodeId,
    pub logvar: NodeId,
}

/// Reparameterized sample on the tape; `noise` is a constant of the same shape.
pub fn reparam_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q: GaussianNodes,
    noise: NodeId,
) -> Result<NodeId> {
    let half = tape.scale(q.logvar, T::lit(0.5))?;
    let sd = tape.exp(half)?;
    let eps = tape.mul(sd, noise)?;
    tape.add(q.mean, eps)
}

/// Sum over all rows and coordinates of the closed-form KL, as a 1×1 node.
pub fn kl_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q: GaussianNodes,
    p: GaussianNodes,
) -> Result<NodeId> {
    let d = tape.sub(q.logvar, p.logvar)?;
    let ratio = tape.exp(d)?;
    let diff = tape.sub(q.mean, p.mean)?;
    let sq = tape.square(diff)?;
    let neg_lp = tape.scale(p.logvar, -T::one())?;
    let prec = tape.exp(neg_lp)?;
    let maha = tape.mul(sq, prec)?;
    let s = tape.add(ratio, maha)?;
    let s = tape.sub(s, d)?;
    let minus_one = tape.constant_scalar(-T::one())?;
    let s = tape.add(s, minus_one)?;
    let total = tape.sum(s)?;
    tape.scale(total, T::lit(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;

    #[test]
    fn reparam_special_cases() {
        let q = GaussianDiag::new(vec![0.5, -1.0], vec![0.3, 2.0]).unwrap();
        assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), q.mean);
        let unit = GaussianDiag::<f64>::standard(2);
        assert_eq!(reparam_sample(&unit, &[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert!(reparam_sample(&unit, &[1.0]).is_err());
    }

    #[test]
    fn kl_special_cases() {
        let q = GaussianDiag::<f64>::new(vec![0.3, -0.2], vec![0.1, -0.5]).unwrap();
        assert_eq!(kl_diag_gaussian(&q, &q).unwrap(), 0.0);
        let a = GaussianDiag::<f64>::new(vec![0.0], vec![0.0]).unwrap();
        let b = GaussianDiag::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_diag_gaussian(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let wide = GaussianDiag::new(vec![0.0], vec![4f64.ln()]).unwrap();
        // ½(4 − 1 − ln 4)
        let expect = 0.5 * (3.0 - 4f64.ln());
        assert!((kl_diag_gaussian(&wide, &a).unwrap() - expect).abs() < 1e-15);
        assert!(kl_diag_gaussian(&a, &GaussianDiag::standard(2)).is_err());
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let q = GaussianDiag::new(vec![0.3, -0.2, 1.0], vec![0.1, -0.5, 0.7]).unwrap();
        let p = GaussianDiag::new(vec![-0.4, 0.2, 0.9], vec![0.6, 0.2, -1.1]).unwrap();
        let mut t = Tape::<f64>::new();
        let nodes: Vec<NodeId> = [&q.mean, &q.logvar, &p.mean, &p.logvar]
            .iter()
            .map(|v| t.constant(Matrix::row_vector(v)).unwrap())
            .collect();
        let k = kl_on_tape(
            &mut t,
            GaussianNodes { mean: nodes[0], logvar: nodes[1] },
            GaussianNodes { mean: nodes[2], logvar: nodes[3] },
        )
        .unwrap();
        let expect = kl_diag_gaussian(&q, &p).unwrap();
        assert!((t.scalar(k) - expect).abs() < 1e-14);
    }

    #[test]
    fn score_is_negative_standardized_residual() {
        let g = GaussianDiag::new(vec![1.0], vec![2f64.ln()]).unwrap();
        assert!((g.score(&[3.0])[0] + 1.0).abs() < 1e-15);
    }
}
