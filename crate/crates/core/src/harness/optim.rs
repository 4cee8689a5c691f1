//! Optimisers keyed by parameter name.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::Tensor;

/// Gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        *v = v.zip_with(grad, |vv, g| self.momentum * vv + g)?;
        let lr = self.lr;
        *param = param.zip_with(v, |p, vv| p - lr * vv)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per batch before `step`.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        let (b1, b2) = (self.beta1, self.beta2);
        let t = self.t.max(1) as i32;
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
        *m = m.zip_with(grad, |mm, g| b1 * mm + (1.0 - b1) * g)?;
        *v = v.zip_with(grad, |vv, g| b2 * vv + (1.0 - b2) * g * g)?;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step = m.zip_with(v, |mm, vv| (mm / c1) / ((vv / c2).sqrt() + self.eps))?;
        let lr = self.lr;
        *param = param.zip_with(&step, |p, s| p - lr * s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Sgd::new(0.1, 0.5);
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        opt.step("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        opt.step("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(0.01);
        opt.tick();
        let mut p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.step("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-8);
        assert!((p.data()[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = Tensor::new(vec![1], vec![3.0]).unwrap();
        for _ in 0..500 {
            opt.tick();
            let g = p.map(|x| 2.0 * (x - 1.0));
            opt.step("p", &mut p, &g).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-2);
    }
}
