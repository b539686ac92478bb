use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new(0.001, 0.9, 5e-4).expect("defaults are valid")
    }
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        // lr == 0 is allowed so that a zero step can be expressed.
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("sgd lr {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("sgd momentum {momentum} outside [0,1)")));
        }
        if weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// `v <- momentum * v + grad + wd * w; w <- w - lr * v`.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape("optimizer bound to a different parameter list"));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(i));
            }
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad().expect("checked").to_vec();
            let w = p.values_mut();
            for j in 0..w.len() {
                v[j] = self.momentum * v[j] + g[j] + self.weight_decay * w[j];
                w[j] -= self.lr * v[j];
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("adam lr {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid("adam betas must lie in [0,1)"));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("adam eps must be positive"));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape("optimizer bound to a different parameter list"));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(i));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad().expect("checked").to_vec();
            let w = p.values_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(w: f64, g: f64) -> Tensor {
        let mut t = Tensor::param(vec![1], vec![w]).unwrap();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn decay_only_sgd_step() {
        let mut p = param_with_grad(1.0, 0.0);
        let mut sgd = SgdState::new(0.001, 0.0, 5e-4).unwrap();
        sgd.step(&mut [&mut p]).unwrap();
        assert!((p.values()[0] - 0.9999995).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = param_with_grad(0.3, 2.0);
        let mut sgd = SgdState::new(0.0, 0.9, 5e-4).unwrap();
        sgd.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values()[0], 0.3);
    }

    #[test]
    fn sgd_defaults() {
        let s = SgdState::default();
        assert_eq!((s.lr, s.momentum, s.weight_decay), (0.001, 0.9, 5e-4));
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            SgdState::default().step(&mut [&mut p]),
            Err(Error::MissingGrad(0))
        ));
        assert!(matches!(
            AdamState::new(1e-4).unwrap().step(&mut [&mut p]),
            Err(Error::MissingGrad(0))
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = param_with_grad(0.0, 1.0);
        let mut adam = AdamState::new(1e-4).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert!((p.values()[0] + 1e-4).abs() < 1e-11);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = param_with_grad(0.7, 0.0);
        let mut adam = AdamState::new(1e-4).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values()[0], 0.7);
    }
}
