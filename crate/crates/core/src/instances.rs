//! Small reference problems shared by tests, benches and the command line.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::geometry_so3::{so3_exp, RotationState};
use crate::processes::{
    GaussianMixture, GaussianProcess, MaskedProcess, NoiseSchedule, ScheduleKind, SeqSpace, So3Process,
};
use crate::rewards::RewardModel;

/// Two tokens at two positions, eight linear steps.
///
/// Data law `{AA: .4, AB: .1, BA: .15, BB: .35}`, rewards `{0, .5, .25, 1}`.
pub fn tiny_discrete() -> Result<(MaskedProcess, RewardModel)> {
    tiny_discrete_with(ScheduleKind::Linear, 8)
}

/// [`tiny_discrete`] with another schedule or step count.
pub fn tiny_discrete_with(kind: ScheduleKind, steps: usize) -> Result<(MaskedProcess, RewardModel)> {
    let space = SeqSpace::new(2, 2)?;
    let process = MaskedProcess::new(NoiseSchedule::new(kind, steps)?, space, vec![0.4, 0.1, 0.15, 0.35])?;
    Ok((process, RewardModel::Table { space, values: vec![0.0, 0.5, 0.25, 1.0] }))
}

/// One binary position with data `[.75, .25]` and reward `[0, 1]`.
pub fn binary_masked(kind: ScheduleKind, steps: usize) -> Result<(MaskedProcess, RewardModel)> {
    let space = SeqSpace::new(2, 1)?;
    let process = MaskedProcess::new(NoiseSchedule::new(kind, steps)?, space, vec![0.75, 0.25])?;
    Ok((process, RewardModel::Table { space, values: vec![0.0, 1.0] }))
}

/// Standard normal data in one dimension with reward `r(x) = x`.
pub fn gaussian_1d(kind: ScheduleKind, steps: usize) -> Result<(GaussianProcess, RewardModel)> {
    let process = GaussianProcess::new(NoiseSchedule::new(kind, steps)?, GaussianMixture::standard(1)?);
    Ok((process, RewardModel::Linear { coef: vec![1.0], offset: 0.0 }))
}

/// Rotations concentrated near the identity, rewarded by `tr(R_0^T R)` for a
/// fixed `R_0` about 0.54 rad away.
pub fn so3_mode(steps: usize, kappa: f64) -> Result<(So3Process, RewardModel)> {
    let process = So3Process::new(steps, RotationState::identity(), kappa)?;
    let target: Matrix3<f64> = so3_exp(&RotationState::identity(), &Vector3::new(0.4, -0.3, 0.2)).0;
    Ok((process, RewardModel::Frobenius { target }))
}
