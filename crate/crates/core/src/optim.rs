//! Adam with a linear warmup / linear decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::ParamSet;
use crate::tensor::Array;

/// Linear warmup to the peak rate, then linear decay to zero.
///
/// The rate is zero at position 0, reaches `peak` after `warmup_frac` of the
/// total steps, and returns to zero at the final position.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn rate(&self, position: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let total = self.total_steps as f64;
        let t = (position as f64).min(total);
        let warmup = self.warmup_frac * total;
        if warmup > 0.0 && t < warmup {
            self.peak * t / warmup
        } else if total - warmup > 0.0 {
            self.peak * (total - t) / (total - warmup)
        } else if t >= total {
            0.0
        } else {
            self.peak
        }
    }
}

/// Standard Adam. Moments are kept at the run precision; gradients are
/// zeroed after every step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    t: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|(_, p)| Array::zeros(p.value.shape().to_vec())).collect();
        let v = params.iter().map(|(_, p)| Array::zeros(p.value.shape().to_vec())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn moments(&self) -> (&[Array<T>], &[Array<T>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state from a checkpoint.
    pub fn restore(&mut self, m: Vec<Array<T>>, v: Vec<Array<T>>, t: usize) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} moment tensors, expected {}",
                m.len(),
                self.m.len()
            )));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    /// One update with the given scheduled rate, then zero all gradients.
    pub fn step(&mut self, params: &mut ParamSet<T>, learning_rate: f64) -> Result<()> {
        if learning_rate < 0.0 {
            return Err(Error::Config(format!("negative learning rate {learning_rate}")));
        }
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(learning_rate);
        let eps = T::from_f64(self.eps);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let val = p.value.data_mut();
            let grad = p.grad.data_mut();
            for j in 0..val.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                val[j] -= lr * mhat / (vhat.sqrt() + eps);
                grad[j] = T::zero();
            }
        }
        Ok(())
    }
}
