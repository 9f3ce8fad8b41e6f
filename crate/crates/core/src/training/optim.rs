//! Warmup/linear-decay schedule and Adam.

use crate::encoder::{Grads, ModelParams};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Number of warmup steps, `ceil(fraction · total)`.
///
/// The product is nudged down by 1e-9 before rounding up so that values
/// like `0.1 · 70` (which is `7.000000000000001` in binary) give 7, not 8.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    let exact = warmup_fraction * total_steps as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(total_steps)
}

/// Linear warmup to `lr_max` over the warmup steps, then linear decay
/// towards zero. Always in `(0, lr_max]` for `step < total_steps`.
pub fn lr_at(step: usize, total_steps: usize, lr_max: f64, warmup_fraction: f64) -> f64 {
    debug_assert!(step < total_steps);
    let w = warmup_steps(total_steps, warmup_fraction);
    if step < w {
        lr_max * (step + 1) as f64 / w as f64
    } else {
        lr_max * (total_steps - step) as f64 / (total_steps - w) as f64
    }
}

/// First and second moment estimates plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts without
/// touching the parameters.
pub fn adam_step(params: &mut ModelParams, grads: &Grads, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.values().len();
    if grads.values.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            n,
            grads.values.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            task: String::new(),
            step: state.t as usize,
            detail: format!("gradient coordinate {i} is {}", grads.values[i]),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    let values = params.values_mut();
    for (((x, &g), m), v) in values.iter_mut().zip(&grads.values).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
    }
    Ok(())
}
