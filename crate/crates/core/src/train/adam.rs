use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction and weight decay added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified when a gradient is not
    /// finite or mis-shaped.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.numel() != m.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    step: self.step + 1,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((theta, &grad), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let grad = grad + self.weight_decay * *theta;
                *mi = BETA1 * *mi + (1.0 - BETA1) * grad;
                *vi = BETA2 * *vi + (1.0 - BETA2) * grad * grad;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut adam = AdamState::new(&p, 1e-3, 0.0);
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expect = 0.5 - 1e-3 / (1.0 + EPSILON);
        assert!((p[0].item() - expect).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut adam = AdamState::new(&p, 1e-2, 0.0);
        for _ in 0..3 {
            adam.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_with_step() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut adam = AdamState::new(&p, 1e-2, 0.0);
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let before = p.clone();
        let err = adam.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 2 }));
        assert_eq!(p, before);
    }
}
