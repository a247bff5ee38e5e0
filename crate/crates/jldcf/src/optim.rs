use std::collections::BTreeMap;

use crate::error::OpError;
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay folded into the gradient:
///
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive, got {lr}");
        assert!(
            (0.0..1.0).contains(&momentum),
            "momentum must be in [0, 1), got {momentum}"
        );
        assert!(
            weight_decay >= 0.0,
            "weight decay must be non-negative, got {weight_decay}"
        );
        OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Update one named parameter in place, consuming its gradient.
    pub fn step_param(&mut self, name: &str, param: &mut Tensor) -> Result<(), OpError> {
        let grad = param
            .grad
            .take()
            .ok_or_else(|| OpError::MissingGradient(name.to_string()))?;
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.numel()]);
        debug_assert_eq!(v.len(), param.numel());
        for i in 0..param.numel() {
            v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * param.data[i];
            param.data[i] -= self.lr * v[i];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut opt = OptimizerState::new(1.0, 0.0, 0.0);
        let mut p = Tensor::new(vec![2], vec![1.0, -3.0]);
        p.grad = Some(vec![0.25, -0.5]);
        opt.step_param("p", &mut p).unwrap();
        assert_eq!(p.data, vec![0.75, -2.5]);
    }

    #[test]
    fn two_momentum_steps_match_recurrence() {
        // constant gradient g, momentum 0.99, lr eta:
        // step 1 moves by eta*g, step 2 by eta*1.99*g -> total eta*g*(1 + 1.99)
        let eta = 0.1;
        let gval = 0.4;
        let mut opt = OptimizerState::new(eta, 0.99, 0.0);
        let mut p = Tensor::new(vec![1], vec![2.0]);
        for _ in 0..2 {
            p.grad = Some(vec![gval]);
            opt.step_param("p", &mut p).unwrap();
        }
        let expect = 2.0 - eta * gval * (1.0 + 1.99);
        assert!((p.data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_toward_zero() {
        let (lr, wd) = (0.5, 0.01);
        let mut opt = OptimizerState::new(lr, 0.0, wd);
        let mut p = Tensor::new(vec![1], vec![4.0]);
        p.grad = Some(vec![0.0]);
        opt.step_param("p", &mut p).unwrap();
        assert!((p.data[0] - (4.0 - lr * wd * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0);
        let mut p = Tensor::zeros(&[3]);
        assert!(matches!(
            opt.step_param("w", &mut p),
            Err(OpError::MissingGradient(_))
        ));
    }
}
