//! Adam optimizer and the step learning-rate schedule.

use super::{Params, Scalar};

/// Step decay: the rate starts at `base` and is multiplied by `factor`
/// every `interval` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base: 1e-3, factor: 0.9, interval: 30 }
    }
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.base, self.factor, self.interval, epoch)
    }
}

/// `base * factor^(epoch / interval)`, evaluated as the literal recurrence
/// (one multiply per completed interval) so logged rates match it exactly.
pub fn lr_at_epoch(base: f64, factor: f64, interval: usize, epoch: usize) -> f64 {
    let steps = epoch / interval.max(1);
    let mut lr = base;
    for _ in 0..steps {
        lr *= factor;
    }
    lr
}

/// Adam with bias correction. Gradients are cleared after each step.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter using its accumulated
    /// gradient, then clear all gradients.
    pub fn step<T: Scalar>(&mut self, params: &mut Params<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(lr);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + one_m_b1 * g;
                p.v[i] = b2 * p.v[i] + one_m_b2 * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grads();
    }
}
