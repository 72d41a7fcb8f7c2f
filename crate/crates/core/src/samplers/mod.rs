//! Guided samplers targeting `p(x) ∝ exp(r(x)/alpha) p_pre(x)`.
//!
//! Every random draw comes from a counter-based stream keyed by particle and
//! step, so outputs depend only on the seed.

mod discrete;
mod gradient;
mod local;
mod smc;
mod walk_jump;

pub use discrete::{discrete_guidance, DiscreteGuidedKernel, DiscreteGuidance};
pub use gradient::{classifier_guidance, so3_guidance, GuidedGaussianKernel, GuidedSo3Kernel};
pub use local::{beam_search, svdd, svdd_chain, svdd_paths};
pub use smc::{nested_smc, smc_guidance};
pub use walk_jump::{walk_jump, WalkJumpConfig, WalkJumpReport};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::processes::{Kernel, Process};
use crate::rewards::Reward;
use crate::rng::{stream, Purpose, StreamRng};

/// Resampling scheme used when the effective sample size drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

impl std::str::FromStr for Resampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(Self::Multinomial),
            "systematic" => Ok(Self::Systematic),
            other => Err(invalid(format!("unknown resampling scheme `{other}`"))),
        }
    }
}

/// Shared knobs of the derivative-free samplers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Temperature; `0` means greedy selection where a sampler allows it.
    pub alpha: f64,
    /// Number of particles `N`.
    pub particles: usize,
    /// Candidates per particle and step `M`.
    pub candidates: usize,
    /// Resample when `ESS < ess_threshold * N`.
    pub ess_threshold: f64,
    pub resampling: Resampling,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { alpha: 1.0, particles: 100, candidates: 8, ess_threshold: 0.5, resampling: Resampling::Multinomial, seed: 0 }
    }
}

impl GuidanceConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(invalid("alpha must be non-negative"));
        }
        if self.particles == 0 || self.candidates == 0 {
            return Err(invalid("need at least one particle and one candidate"));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return Err(invalid("ess_threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Output of a sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerReport<S> {
    /// Equally weighted final samples.
    pub samples: Vec<S>,
    /// ESS after weighting, from the initial step (`t = T`) down to `t = 1`.
    pub ess_trace: Vec<f64>,
    /// Steps after whose weighting the population was resampled (`T + 1` is the initial step).
    pub resampled_at: Vec<usize>,
    /// Estimate of `log E_pre[exp(r/alpha)]` when the sampler provides one.
    pub log_z: Option<f64>,
    /// Mean of `ESS / M` over local candidate sets.
    pub local_ess: Option<f64>,
}

impl<S> SamplerReport<S> {
    pub(crate) fn plain(samples: Vec<S>) -> Self {
        Self { samples, ess_trace: Vec::new(), resampled_at: Vec::new(), log_z: None, local_ess: None }
    }

    /// Mean and maximum reward of the samples.
    pub fn reward_stats<R: Reward<S>>(&self, reward: &R) -> (f64, f64) {
        let vals: Vec<f64> = self.samples.iter().map(|x| reward.reward(x)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        (mean, vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }
}

pub fn initial_state<P: Process>(process: &P, seed: u64, lane: usize) -> P::State {
    process.sample_initial(&mut stream(seed, lane as u64, process.steps() as u64 + 1, Purpose::Initial))
}

pub(crate) fn step_rng(seed: u64, lane: usize, t: usize, purpose: Purpose) -> StreamRng {
    stream(seed, lane as u64, t as u64, purpose)
}

/// Roll out `n` independent chains under `kernel`.
pub fn sample_with_kernel<P: Process, K: Kernel<P::State> + ?Sized>(
    process: &P,
    kernel: &K,
    n: usize,
    seed: u64,
) -> Result<Vec<P::State>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut x = initial_state(process, seed, i);
            for t in (1..=process.steps()).rev() {
                x = kernel.sample(t, &x, &mut step_rng(seed, i, t, Purpose::Propose))?;
            }
            Ok(x)
        })
        .collect()
}

/// Unguided samples from the pre-trained chain.
pub fn sample_pretrained<P: Process>(process: &P, n: usize, seed: u64) -> Result<Vec<P::State>> {
    sample_with_kernel(process, &crate::processes::Pretrained(process), n, seed)
}

/// Highest-reward sample among `n` pre-trained draws, with all rewards.
pub fn best_of_n<P: Process, R: Reward<P::State>>(
    process: &P,
    reward: &R,
    n: usize,
    seed: u64,
) -> Result<(P::State, Vec<f64>)> {
    if n == 0 {
        return Err(invalid("best-of-N needs N >= 1"));
    }
    let xs = sample_pretrained(process, n, seed)?;
    let rs: Vec<f64> = xs.iter().map(|x| reward.reward(x)).collect();
    let best = (0..n).fold(0, |b, i| if rs[i] > rs[b] { i } else { b });
    Ok((xs[best].clone(), rs))
}

/// Normalized probabilities from log-weights.
pub(crate) fn normalize(log_w: &[f64]) -> Option<Vec<f64>> {
    let mx = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = w.iter().sum();
    Some(w.into_iter().map(|v| v / s).collect())
}

/// Inverse-CDF draw of one index.
pub(crate) fn categorical(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Ancestor indices for one resampling step.
pub(crate) fn resample(probs: &[f64], scheme: Resampling, rng: &mut StreamRng) -> Vec<usize> {
    let n = probs.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cdf.push(acc);
    }
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(n - 1);
    let pick = |u: f64| cdf.partition_point(|&c| c <= u * acc).min(last);
    match scheme {
        Resampling::Multinomial => (0..n).map(|_| pick(rng.random())).collect(),
        Resampling::Systematic => {
            let u0: f64 = rng.random();
            (0..n).map(|k| pick((u0 + k as f64) / n as f64)).collect()
        }
    }
}
