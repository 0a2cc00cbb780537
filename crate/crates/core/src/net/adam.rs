use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::params::{Gradient, NetParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates for one parameter vector.
///
/// Moments are kept in single precision like the parameters themselves, so
/// a saved optimizer state resumes bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut NetParams, grad: &Gradient, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if grad.values.len() != params.values.len() || self.m.len() != params.values.len() {
            return Err(Error::ShapeMismatch {
                what: "gradient vs parameters",
                expected: params.values.len(),
                found: grad.values.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (((p, m), v), &g) in params
            .values
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&grad.values)
        {
            let mn = BETA1 * *m as f64 + (1.0 - BETA1) * g;
            let vn = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let upd = lr * (mn / c1) / ((vn / c2).sqrt() + EPSILON);
            *p = (*p as f64 - upd) as f32;
        }
        Ok(())
    }
}

/// Stateless form: applies update number `step` (1-based) given moments.
pub fn sgd_adam_step(
    params: &NetParams,
    grad: &Gradient,
    lr: f64,
    state: &mut Adam,
) -> Result<NetParams> {
    let mut out = params.clone();
    state.step(&mut out, grad, lr)?;
    Ok(out)
}
