use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::processes::{ContinuousState, GaussianMixture};
use crate::rewards::Reward;
use crate::rng::{stream, Purpose};

/// Settings of the smoothed Langevin chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkJumpConfig {
    /// Smoothing noise level.
    pub sigma: f64,
    pub alpha: f64,
    /// Langevin step size.
    pub step: f64,
    pub burn_in: usize,
    pub samples: usize,
    /// Keep every `thin`-th state after burn-in.
    pub thin: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkJumpReport {
    /// Thinned walk states on the smoothed space.
    pub walk: Vec<ContinuousState>,
    /// One-step denoised jumps `y + sigma^2 grad log p_sigma(y)`.
    pub jumps: Vec<ContinuousState>,
}

/// Walk-jump sampling: Langevin on the `sigma`-smoothed tilted density, then a
/// Tweedie jump back to the data space.
pub fn walk_jump<R: Reward<ContinuousState, Grad = Vec<f64>>>(
    data: &GaussianMixture,
    reward: &R,
    cfg: &WalkJumpConfig,
) -> Result<WalkJumpReport> {
    if !(cfg.sigma > 0.0 && cfg.alpha > 0.0 && cfg.step > 0.0) || cfg.thin == 0 {
        return Err(invalid("walk-jump needs positive sigma, alpha, step and thinning"));
    }
    let smooth = data.smoothed(cfg.sigma * cfg.sigma);
    let mut rng = stream(cfg.seed, 0, 0, Purpose::Chain);
    let mut y = vec![0.0; data.dim()];
    let noise = (2.0 * cfg.step).sqrt();
    let mut walk = Vec::with_capacity(cfg.samples);
    let total = cfg.burn_in + cfg.samples * cfg.thin;
    for it in 0..total {
        let g = reward.gradient(&y)?;
        let s = smooth.score(&y);
        for d in 0..y.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[d] += cfg.step * (g[d] / cfg.alpha + s[d]) + noise * e;
        }
        if it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0 {
            walk.push(y.clone());
        }
    }
    let s2 = cfg.sigma * cfg.sigma;
    let jumps = walk
        .iter()
        .map(|y| y.iter().zip(smooth.score(y)).map(|(a, b)| a + s2 * b).collect())
        .collect();
    Ok(WalkJumpReport { walk, jumps })
}
