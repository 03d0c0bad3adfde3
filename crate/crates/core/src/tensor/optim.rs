use alloc::vec;
use alloc::vec::Vec;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::math;

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(alloc::format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    Ok(())
}

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.lr = lr;
        Ok(())
    }

    /// `v ← μ v + g; θ ← θ − lr v`.
    pub fn step(&mut self, store: &mut ParamStore) {
        let tensors = store.tensors_mut();
        if self.velocity.len() != tensors.len() {
            self.velocity = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for (t, vel) in tensors.iter_mut().zip(&mut self.velocity) {
            let (data, grad) = t.parts_mut();
            let Some(grad) = grad else { continue };
            for ((p, g), v) in data.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::config("adam betas must lie in [0, 1) and eps > 0"));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn with_lr(lr: f64) -> Result<Self> {
        Adam::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.lr = lr;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        let tensors = store.tensors_mut();
        if self.m.len() != tensors.len() {
            self.m = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for ((t, m), v) in tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = t.parts_mut();
            let Some(grad) = grad else { continue };
            for (((p, &g), mi), vi) in data
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}
