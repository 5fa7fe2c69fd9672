use crate::{Error, Result};

use super::Tensor;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + grad; param <- param - learning_rate * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdmState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Default for SgdmState {
    fn default() -> Self {
        Self::new(0.01, 0.9).expect("defaults are valid")
    }
}

impl SgdmState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {learning_rate} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum {momentum} must lie in [0, 1)")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update. Velocities are created (zeroed) on the first call
    /// and must match the parameter layout on every later call.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::LengthMismatch {
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.numel() != g.len() || v.len() != g.len() {
                return Err(Error::LengthMismatch {
                    expected: v.len(),
                    got: g.len(),
                });
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Vec<Tensor> {
        vec![Tensor::from_vec([v.len()], v.to_vec()).unwrap()]
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut p = param(&[1.0, -2.0]);
        let mut s = SgdmState::new(0.0, 0.9).unwrap();
        s.step(&mut p, &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.velocity()[0], vec![3.0, 4.0]);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = param(&[1.0, -2.0]);
        let mut s = SgdmState::new(0.1, 0.0).unwrap();
        for _ in 0..3 {
            s.step(&mut p, &[vec![0.5, -1.5]]).unwrap();
        }
        let mut q = [1.0, -2.0];
        for _ in 0..3 {
            q[0] -= 0.1 * 0.5;
            q[1] -= 0.1 * -1.5;
        }
        assert_eq!(p[0].data(), &q);
    }

    #[test]
    fn two_momentum_steps_closed_form() {
        let g = 0.7;
        let mut p = param(&[0.0]);
        let mut s = SgdmState::new(0.01, 0.9).unwrap();
        s.step(&mut p, &[vec![g]]).unwrap();
        s.step(&mut p, &[vec![g]]).unwrap();
        let expected = -0.01 * (g + 1.9 * g);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths() {
        let mut p = param(&[0.0, 1.0]);
        let mut s = SgdmState::default();
        assert!(s.step(&mut p, &[vec![1.0]]).is_err());
        assert!(s.step(&mut p, &[]).is_err());
        assert!(SgdmState::new(0.01, 1.0).is_err());
    }
}
