//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::params::{ParamStore, RegClass};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `η(T) = η₀ (1 + cos(π T / T_max)) / 2`.
pub fn cosine_lr(base: f64, iteration: usize, t_max: usize) -> f64 {
    base * (1.0 + (PI * iteration as f64 / t_max as f64).cos()) / 2.0
}

pub struct Adam {
    weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update with learning rate `lr`; `grads` follows store order and
    /// `None` means the parameter received no gradient this step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let decay = if p.class == RegClass::WeightDecay {
                lr * self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let values = p.value.data_mut();
            if let Some(g) = &grads[k] {
                for (((x, gi), mi), vi) in values.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                    *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                    let update = (*mi / bc1) / ((*vi / bc2).sqrt() + EPSILON);
                    *x -= lr * update + decay * *x;
                }
            } else if decay > 0.0 {
                values.iter_mut().for_each(|x| *x -= decay * *x);
            }
        }
    }
}
