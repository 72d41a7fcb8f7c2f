//! Pre-trained denoising processes with exact analytic denoisers.

pub mod gaussian;
pub mod masked;
pub mod schedule;
pub mod so3;

use std::fmt::Debug;

use crate::error::Result;
use crate::rng::StreamRng;

pub use gaussian::{ContinuousState, GaussianMixture, GaussianProcess, MixtureComponent};
pub use masked::{DiscreteSequence, MaskedProcess, PositionKernel, SeqSpace, StepProbs, MASK};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use so3::So3Process;

/// A pre-trained backward chain `x_T -> ... -> x_0`.
pub trait Process: Send + Sync {
    type State: Clone + Send + Sync + PartialEq + Debug;

    /// Number of denoising steps `T`.
    fn steps(&self) -> usize;

    /// Draw `x_T`.
    fn sample_initial(&self, rng: &mut StreamRng) -> Self::State;

    /// True when `x_T` is a point mass.
    fn initial_is_deterministic(&self) -> bool;

    /// Draw `x_{t-1}` given `x_t`.
    fn sample_step(&self, t: usize, x: &Self::State, rng: &mut StreamRng) -> Result<Self::State>;

    /// `log p(x_{t-1} = next | x_t = prev)`.
    fn log_prob_step(&self, t: usize, next: &Self::State, prev: &Self::State) -> Result<f64>;

    /// Noise a clean state forward to level `t`.
    fn forward_sample(&self, x0: &Self::State, t: usize, rng: &mut StreamRng) -> Result<Self::State>;
}

/// A transition kernel usable as a proposal.
pub trait Kernel<S>: Send + Sync {
    fn sample(&self, t: usize, x: &S, rng: &mut StreamRng) -> Result<S>;
    fn log_prob(&self, t: usize, next: &S, prev: &S) -> Result<f64>;
}

/// Kernels over sequences that can enumerate their support.
pub trait DiscreteKernel: Kernel<DiscreteSequence> {
    fn support(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<(DiscreteSequence, f64)>>;
}

/// The process's own backward kernel viewed as a [`Kernel`].
#[derive(Debug, Clone, Copy)]
pub struct Pretrained<'a, P>(pub &'a P);

impl<P: Process> Kernel<P::State> for Pretrained<'_, P> {
    fn sample(&self, t: usize, x: &P::State, rng: &mut StreamRng) -> Result<P::State> {
        self.0.sample_step(t, x, rng)
    }

    fn log_prob(&self, t: usize, next: &P::State, prev: &P::State) -> Result<f64> {
        self.0.log_prob_step(t, next, prev)
    }
}

impl DiscreteKernel for Pretrained<'_, MaskedProcess> {
    fn support(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<(DiscreteSequence, f64)>> {
        self.0.support(t, x)
    }
}
