use super::{sample_with_kernel, SamplerReport};
use crate::error::{invalid, Result};
use crate::geometry_so3::{so3_exp, tangent_noise, RotationState};
use crate::processes::gaussian::{gaussian_draw, isotropic_log_density};
use crate::processes::{ContinuousState, GaussianProcess, Kernel, So3Process};
use crate::rng::StreamRng;
use crate::values::{ContinuousValue, RotationValue};

/// Pre-trained Gaussian step with mean shifted by `sigma_t^2 grad v_t(x_t) / alpha`.
pub struct GuidedGaussianKernel<'a, V: ?Sized> {
    pub process: &'a GaussianProcess,
    pub values: &'a V,
    pub alpha: f64,
}

impl<'a, V: ContinuousValue + ?Sized> GuidedGaussianKernel<'a, V> {
    pub fn new(process: &'a GaussianProcess, values: &'a V, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(invalid("classifier guidance needs alpha > 0"));
        }
        Ok(Self { process, values, alpha })
    }

    fn moments(&self, t: usize, x: &ContinuousState) -> Result<(Vec<f64>, f64)> {
        let (mut mean, var) = self.process.step_moments(t, x)?;
        if var > 0.0 {
            let g = self.values.gradient(t, x)?;
            for (m, d) in mean.iter_mut().zip(g) {
                *m += var * d / self.alpha;
            }
        }
        Ok((mean, var))
    }
}

impl<V: ContinuousValue + ?Sized> Kernel<ContinuousState> for GuidedGaussianKernel<'_, V> {
    fn sample(&self, t: usize, x: &ContinuousState, rng: &mut StreamRng) -> Result<ContinuousState> {
        let (mean, var) = self.moments(t, x)?;
        Ok(gaussian_draw(&mean, var, rng))
    }

    fn log_prob(&self, t: usize, next: &ContinuousState, prev: &ContinuousState) -> Result<f64> {
        let (mean, var) = self.moments(t, prev)?;
        Ok(isotropic_log_density(next, &mean, var))
    }
}

/// Classifier guidance for continuous diffusion.
pub fn classifier_guidance<V: ContinuousValue + ?Sized>(
    process: &GaussianProcess,
    values: &V,
    alpha: f64,
    n: usize,
    seed: u64,
) -> Result<SamplerReport<ContinuousState>> {
    let k = GuidedGaussianKernel::new(process, values, alpha)?;
    Ok(SamplerReport::plain(sample_with_kernel(process, &k, n, seed)?))
}

/// Geodesic step with velocity `dt (score + grad v / alpha) + sqrt(dt) eps`.
pub struct GuidedSo3Kernel<'a, V: ?Sized> {
    pub process: &'a So3Process,
    pub values: &'a V,
    pub alpha: f64,
}

impl<V: RotationValue + ?Sized> GuidedSo3Kernel<'_, V> {
    fn drift(&self, t: usize, x: &RotationState) -> Result<crate::geometry_so3::TangentVector> {
        Ok(self.process.score(t, x) + self.values.riemannian_gradient(t, x)? / self.alpha)
    }
}

impl<V: RotationValue + ?Sized> Kernel<RotationState> for GuidedSo3Kernel<'_, V> {
    fn sample(&self, t: usize, x: &RotationState, rng: &mut StreamRng) -> Result<RotationState> {
        let dt = self.process.dt();
        let vel = self.drift(t, x)? * dt + tangent_noise(rng) * dt.sqrt();
        Ok(so3_exp(x, &vel))
    }

    fn log_prob(&self, t: usize, next: &RotationState, prev: &RotationState) -> Result<f64> {
        self.process.tangent_log_density(prev, next, &self.drift(t, prev)?)
    }
}

/// Classifier guidance on SO(3). Shares noise draws with the unguided chain
/// under the same seed, so runs are paired.
pub fn so3_guidance<V: RotationValue + ?Sized>(
    process: &So3Process,
    values: &V,
    alpha: f64,
    n: usize,
    seed: u64,
) -> Result<SamplerReport<RotationState>> {
    if !(alpha > 0.0) {
        return Err(invalid("classifier guidance needs alpha > 0"));
    }
    let k = GuidedSo3Kernel { process, values, alpha };
    Ok(SamplerReport::plain(sample_with_kernel(process, &k, n, seed)?))
}
