//! Inference-time guidance for diffusion-style generative processes.
//!
//! The crate samples from reward-tilted targets
//! `p(x) ∝ exp(r(x)/alpha) p_pre(x)` without retraining the pre-trained chain. It
//! ships exact oracles for small instances so every sampler can be checked
//! against the law it is meant to produce.

pub mod distill;
pub mod error;
pub mod geometry_so3;
pub mod instances;
pub mod oracle_metrics;
pub mod processes;
pub mod rewards;
pub mod rng;
pub mod values;

pub use error::{Error, Result};
pub use geometry_so3::{RotationState, TangentVector};
pub use oracle_metrics::{DistributionTable, SampleMetrics};
pub use processes::{
    ContinuousState, DiscreteSequence, GaussianMixture, GaussianProcess, Kernel, MaskedProcess, NoiseSchedule, Process,
    ScheduleKind, SeqSpace, So3Process, MASK,
};
pub use rewards::{Reward, RewardModel};
pub use values::{Provenance, ValueModel};
pub mod samplers;
pub mod search_refine;
