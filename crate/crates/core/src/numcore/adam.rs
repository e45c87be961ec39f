use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed accumulators for `n` parameters, β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(n: usize, lr: T) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one update in place. Nothing is modified when a gradient entry is
    /// not finite.
    pub fn update(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state for {} params given {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        s.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 → Δ = -lr · 1/(1 + ε)
        let mut s = AdamState::new(1, 0.1);
        let mut p: Vec<f64> = vec![0.0];
        s.update(&mut p, &[1.0]).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![0.0; 3];
        match s.update(&mut p, &[0.0, f64::NAN, 1.0]) {
            Err(Error::NonFiniteGradient { index }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut s = AdamState::new(2, 0.05);
            let mut p = vec![1.0, -1.0];
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + (k as f64).sin()).collect();
                s.update(&mut p, &g).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
