use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AdamError {
    #[error("gradient of parameter {0} is not finite")]
    NonFinite(usize),
    #[error("expected {expected} gradients, got {got}")]
    Count { expected: usize, got: usize },
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Array2<T>]) -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Array2<T>], grads: &[Array2<T>], lr: T) -> Result<(), AdamError> {
        if grads.len() != params.len() {
            return Err(AdamError::Count {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(AdamError::NonFinite(i));
        }
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Scales all gradients together so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Array2<T>], max_norm: T) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Piecewise-constant learning rate over 1-based epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    /// Rate during the first epoch.
    pub first: f64,
    /// Rate from the second epoch through `middle_until`.
    pub middle: f64,
    pub middle_until: usize,
    /// Rate afterwards.
    pub late: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            first: 1e-3,
            middle: 5e-4,
            middle_until: 10,
            late: 2.5e-4,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        match epoch {
            0 | 1 => self.first,
            e if e <= self.middle_until => self.middle,
            _ => self.late,
        }
    }
}
