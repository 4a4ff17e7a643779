//! SGD with heavy-ball momentum and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(params: &PolicyParams, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: vec![0.0; params.len()],
        }
    }

    /// `v ← μ·v + g; w ← w − lr·v`, then clears the gradients. Bumps the
    /// parameter version, invalidating outstanding loss graphs.
    pub fn step(&mut self, params: &mut PolicyParams, lr: f64) {
        let mu = self.momentum;
        let vel = &mut self.velocity;
        params.apply_update(|w, g| {
            for ((w, g), v) in w.iter_mut().zip(g).zip(vel.iter_mut()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        });
        params.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base_lr: 1e-3,
            min_lr: 0.0,
            total_steps: 10,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(5) - 5e-4).abs() < 1e-15);
        assert!(s.lr(10).abs() < 1e-18);
    }
}
