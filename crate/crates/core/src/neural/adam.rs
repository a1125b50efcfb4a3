use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::{Error, Result};

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient held a NaN or infinity; parameters and moments untouched.
    SkippedNonFinite,
}

/// Adam with bias correction folded into the step size:
/// `θ ← θ − η·sqrt(1−β₂ᵗ)/(1−β₁ᵗ) · m / (sqrt(v) + ε̂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    /// Number of steps skipped because of a non-finite gradient.
    pub skipped: u64,
}

impl OptimState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            skipped: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<StepOutcome> {
        if !params.is_congruent(grad) || self.first_moment.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state of {} values, params {}, grad {}",
                self.first_moment.len(),
                params.len(),
                grad.len()
            )));
        }
        if !grad.is_finite() {
            self.skipped += 1;
            log::warn!(
                "non-finite gradient at optimizer step {}; step skipped",
                self.step_count + 1
            );
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let step_size =
            (self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t))) as f32;
        let eps = self.eps_hat as f32;
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() + eps);
        }
        Ok(StepOutcome::Applied)
    }
}
