//! Rectified Adam and the log-decay weight schedule.

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl RAdam {
    pub fn new(len: usize) -> Self {
        Self::with_params(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Length of the approximated simple moving average after `t` steps.
    pub fn rectification_length(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Whether step `t` uses the variance-adapted update.
    pub fn is_adaptive(&self, t: u64) -> bool {
        self.rectification_length(t) > 4.0
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(shape_err(self.m.len(), params.len()));
        }
        if grad.len() != self.m.len() {
            return Err(shape_err(self.m.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidParameter("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let bc1 = 1.0 - b1.powi(t as i32);
        let rho_t = self.rectification_length(t);
        if rho_t > 4.0 {
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt();
            let bc2 = 1.0 - b2.powi(t as i32);
            for ((p, m), v) in params.iter_mut().zip(&self.m).zip(&self.v) {
                let v_hat = (v / bc2).sqrt();
                *p -= lr * r * (m / bc1) / (v_hat + self.eps);
            }
        } else {
            for (p, m) in params.iter_mut().zip(&self.m) {
                *p -= lr * m / bc1;
            }
        }
        Ok(())
    }
}

/// `10^((lambda / 2) (2 t / T - 1))`.
pub fn schedule_weight(t: usize, total: usize, lambda: f64) -> f64 {
    10f64.powf(lambda / 2.0 * (2.0 * t as f64 / total as f64 - 1.0))
}
