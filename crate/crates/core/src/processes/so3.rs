//! Langevin-type backward chain on SO(3) concentrating around a mode rotation.
//!
//! The model score at `x` is `kappa * grad tr(mode^T x)`. No closed-form
//! posterior exists for this chain, so the denoiser is the identity map.

use nalgebra::Matrix3;

use super::Process;
use crate::error::{invalid, Result};
use crate::geometry_so3::{riemannian_grad, so3_exp, so3_log, tangent_noise, uniform_rotation, RotationState, TangentVector};
use crate::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct So3Process {
    steps: usize,
    mode: Matrix3<f64>,
    kappa: f64,
}

impl So3Process {
    pub fn new(steps: usize, mode: RotationState, kappa: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("SO(3) chain needs at least one step"));
        }
        if mode.orthonormality_error() > 1e-9 || !(kappa >= 0.0) {
            return Err(invalid("mode must be a rotation and kappa non-negative"));
        }
        Ok(Self { steps, mode: mode.0, kappa })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Model score in body-frame coordinates.
    pub fn score(&self, _t: usize, x: &RotationState) -> TangentVector {
        riemannian_grad(x, &self.mode) * self.kappa
    }

    /// Clean-state prediction used by posterior-mean values.
    pub fn denoiser(&self, _t: usize, x: &RotationState) -> RotationState {
        *x
    }

    /// Log density of a tangent-Gaussian step with the given drift.
    pub fn tangent_log_density(&self, prev: &RotationState, next: &RotationState, drift: &TangentVector) -> Result<f64> {
        let v = so3_log(prev, next)?;
        let dt = self.dt();
        let r = v - drift * dt;
        Ok(-0.5 * (r.norm_squared() / dt + 3.0 * (2.0 * std::f64::consts::PI * dt).ln()))
    }
}

impl Process for So3Process {
    type State = RotationState;

    fn steps(&self) -> usize {
        self.steps
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> RotationState {
        uniform_rotation(rng)
    }

    fn initial_is_deterministic(&self) -> bool {
        false
    }

    fn sample_step(&self, t: usize, x: &RotationState, rng: &mut StreamRng) -> Result<RotationState> {
        let dt = self.dt();
        let vel = self.score(t, x) * dt + tangent_noise(rng) * dt.sqrt();
        Ok(so3_exp(x, &vel))
    }

    fn log_prob_step(&self, t: usize, next: &RotationState, prev: &RotationState) -> Result<f64> {
        self.tangent_log_density(prev, next, &self.score(t, prev))
    }

    fn forward_sample(&self, x0: &RotationState, t: usize, rng: &mut StreamRng) -> Result<RotationState> {
        Ok(so3_exp(x0, &(tangent_noise(rng) * (t as f64 * self.dt()).sqrt())))
    }
}
