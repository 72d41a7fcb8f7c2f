use crate::error::{invalid, Result};
use crate::geometry_so3::{riemannian_grad, RotationState, TangentVector};
use crate::processes::{ContinuousState, DiscreteSequence, GaussianProcess, MaskedProcess, So3Process};
use crate::rewards::{Reward, RewardModel};

use super::{ContinuousValue, Provenance, RotationValue, ValueModel};

/// Value approximated by the reward of the denoiser's clean prediction.
///
/// On sequences the reward's multilinear extension is evaluated at the
/// per-position denoiser marginals.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorMeanValue<'a, P, R> {
    pub process: &'a P,
    pub reward: &'a R,
}

impl<'a, P, R> PosteriorMeanValue<'a, P, R> {
    pub fn new(process: &'a P, reward: &'a R) -> Self {
        Self { process, reward }
    }
}

impl ValueModel<DiscreteSequence> for PosteriorMeanValue<'_, MaskedProcess, RewardModel> {
    fn value(&self, _t: usize, x: &DiscreteSequence) -> Result<f64> {
        if x.is_clean() {
            return Ok(self.reward.reward(x));
        }
        let rows = self.process.denoiser(x)?;
        self.reward.multilinear_value(&rows)
    }

    fn provenance(&self) -> Provenance {
        Provenance::PosteriorMean
    }
}

impl<R: Reward<ContinuousState>> ValueModel<ContinuousState> for PosteriorMeanValue<'_, GaussianProcess, R> {
    fn value(&self, t: usize, x: &ContinuousState) -> Result<f64> {
        if x.len() != self.process.dim() {
            return Err(invalid("state dimension does not match the process"));
        }
        if t == 0 {
            return Ok(self.reward.reward(x));
        }
        Ok(self.reward.reward(&self.process.denoiser(t, x)))
    }

    fn provenance(&self) -> Provenance {
        Provenance::PosteriorMean
    }
}

impl<R: Reward<ContinuousState>> ContinuousValue for PosteriorMeanValue<'_, GaussianProcess, R> {}

impl<R: Reward<RotationState, Grad = nalgebra::Matrix3<f64>>> ValueModel<RotationState>
    for PosteriorMeanValue<'_, So3Process, R>
{
    fn value(&self, t: usize, x: &RotationState) -> Result<f64> {
        Ok(self.reward.reward(&self.process.denoiser(t, x)))
    }

    fn provenance(&self) -> Provenance {
        Provenance::PosteriorMean
    }
}

impl<R: Reward<RotationState, Grad = nalgebra::Matrix3<f64>>> RotationValue for PosteriorMeanValue<'_, So3Process, R> {
    fn riemannian_gradient(&self, _t: usize, x: &RotationState) -> Result<TangentVector> {
        Ok(riemannian_grad(x, &self.reward.gradient(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry_so3::{so3_exp, tangent_inner};
    use crate::processes::{GaussianMixture, NoiseSchedule, ScheduleKind, SeqSpace};
    use nalgebra::Matrix3;

    #[test]
    fn binary_posterior_mean_example() {
        let sp = SeqSpace::new(2, 1).unwrap();
        let m = MaskedProcess::new(NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap(), sp, vec![0.75, 0.25]).unwrap();
        let r = RewardModel::table(sp, &[("B".parse().unwrap(), 1.0)], 0.0).unwrap();
        let v = PosteriorMeanValue::new(&m, &r);
        assert!((v.value(4, &"*".parse().unwrap()).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(v.value(2, &"B".parse().unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn continuous_posterior_mean_gradient() {
        let g = GaussianProcess::new(
            NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap(),
            GaussianMixture::standard(1).unwrap(),
        );
        let r = RewardModel::Linear { coef: vec![2.0], offset: 0.0 };
        let v = PosteriorMeanValue::new(&g, &r);
        // r(E[x0|xt]) = 2 sqrt(abar) x for standard normal data.
        let want = 2.0 * g.schedule().alpha_bar(5).sqrt();
        assert!((v.gradient(5, &vec![0.3]).unwrap()[0] - want).abs() < 1e-8);
    }

    #[test]
    fn rotation_gradient_matches_default() {
        struct Plain<'a>(PosteriorMeanValue<'a, So3Process, RewardModel>);
        impl ValueModel<RotationState> for Plain<'_> {
            fn value(&self, t: usize, x: &RotationState) -> Result<f64> {
                self.0.value(t, x)
            }
            fn provenance(&self) -> Provenance {
                Provenance::PosteriorMean
            }
        }
        impl RotationValue for Plain<'_> {}
        let p = So3Process::new(10, RotationState::identity(), 1.0).unwrap();
        let r = RewardModel::Frobenius { target: Matrix3::new(0.2, 1.0, 0.0, 0.3, 0.5, -0.4, 0.0, 0.1, 0.9) };
        let x = so3_exp(&RotationState::identity(), &TangentVector::new(0.4, -0.2, 0.7));
        let exact = PosteriorMeanValue::new(&p, &r).riemannian_gradient(3, &x).unwrap();
        let fd = Plain(PosteriorMeanValue::new(&p, &r)).riemannian_gradient(3, &x).unwrap();
        assert!((exact - fd).amax() < 1e-7);
        let v = TangentVector::new(1.0, 2.0, -1.0);
        assert!(tangent_inner(&exact, &v).is_finite());
    }
}
