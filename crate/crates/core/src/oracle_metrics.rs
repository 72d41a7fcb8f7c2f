//! Exact oracles for small instances and the metrics used to score samplers.

use std::collections::HashSet;
use std::hash::Hash;

use crate::error::{invalid, Error, Result};
use crate::processes::{DiscreteSequence, GaussianMixture, SeqSpace};

/// A normalized law on a finite support together with the log of its normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable<X> {
    pub support: Vec<X>,
    pub probs: Vec<f64>,
    pub log_z: f64,
}

impl<X> DistributionTable<X> {
    /// Normalize log-masses over `support`.
    pub fn from_log_masses(support: Vec<X>, log_mass: &[f64]) -> Result<Self> {
        if support.len() != log_mass.len() || support.is_empty() {
            return Err(invalid("support and masses differ in length"));
        }
        let log_z = logsumexp(log_mass);
        if !log_z.is_finite() {
            return Err(invalid("table has no finite mass"));
        }
        let probs = log_mass.iter().map(|l| (l - log_z).exp()).collect();
        Ok(Self { support, probs, log_z })
    }

    pub fn expectation(&self, f: impl Fn(&X) -> f64) -> f64 {
        self.support.iter().zip(&self.probs).map(|(x, p)| p * f(x)).sum()
    }
}

/// Numerically stable `log sum exp`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if mx == f64::INFINITY {
        return f64::INFINITY;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Tilted law `p^pre exp(r / alpha) / Z` over clean sequences.
pub fn brute_force_target(
    space: SeqSpace,
    pre: &[f64],
    reward: impl Fn(&DiscreteSequence) -> f64,
    alpha: f64,
) -> Result<DistributionTable<DiscreteSequence>> {
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    if pre.len() != space.clean_size() {
        return Err(invalid("prior table does not cover K^L sequences"));
    }
    let support: Vec<DiscreteSequence> = space.clean_states().collect();
    let log_mass: Vec<f64> = support.iter().zip(pre).map(|(y, p)| p.ln() + reward(y) / alpha).collect();
    DistributionTable::from_log_masses(support, &log_mass)
}

/// Tilted law of a one-dimensional mixture on a uniform grid of `cells` cells.
///
/// `log_z` approximates the log normalizer of the continuous tilted density.
pub fn grid_target(
    data: &GaussianMixture,
    reward: impl Fn(f64) -> f64,
    alpha: f64,
    lo: f64,
    hi: f64,
    cells: usize,
) -> Result<DistributionTable<f64>> {
    if data.dim() != 1 || !(hi > lo) || cells == 0 || !(alpha > 0.0) {
        return Err(invalid("grid oracle needs a 1-D law, hi > lo, cells > 0 and alpha > 0"));
    }
    let h = (hi - lo) / cells as f64;
    let support: Vec<f64> = (0..cells).map(|i| lo + (i as f64 + 0.5) * h).collect();
    let log_mass: Vec<f64> = support.iter().map(|&x| data.log_density(&[x]) + reward(x) / alpha + h.ln()).collect();
    DistributionTable::from_log_masses(support, &log_mass)
}

/// Empirical law of clean sequences in index order.
pub fn empirical_discrete(space: SeqSpace, samples: &[DiscreteSequence]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; space.clean_size()];
    for y in samples {
        space.check(y)?;
        if !y.is_clean() {
            return Err(invalid(format!("sample `{y}` is not clean")));
        }
        out[space.clean_index(y)] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Histogram of scalar samples on the cells of a grid table.
pub fn empirical_grid(grid: &DistributionTable<f64>, samples: &[f64]) -> Vec<f64> {
    let n = grid.support.len();
    let h = if n > 1 { grid.support[1] - grid.support[0] } else { 1.0 };
    let lo = grid.support[0] - 0.5 * h;
    let mut out = vec![0.0; n];
    for &x in samples {
        let i = ((x - lo) / h).floor();
        if i >= 0.0 && (i as usize) < n {
            out[i as usize] += 1.0;
        }
    }
    let total = samples.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Effective sample size `(sum w)^2 / sum w^2` from log-weights.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let mx = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::DegenerateWeights { step: 0 });
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for l in log_weights {
        let w = (l - mx).exp();
        s1 += w;
        s2 += w * w;
    }
    Ok(s1 * s1 / s2)
}

/// Total-variation distance between two laws on the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid("laws have different supports"));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p || q)`; infinite when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid("laws have different supports"));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| match (a > 0.0, b > 0.0) {
            (false, _) => 0.0,
            (true, false) => f64::INFINITY,
            (true, true) => a * (a / b).ln(),
        })
        .sum())
}

/// Expected maximum reward of `n` independent draws from a finite law.
pub fn expected_best_of_n(probs: &[f64], rewards: &[f64], n: usize) -> f64 {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]));
    let mut below = 0.0f64;
    let mut total = 0.0;
    for i in order {
        let upto = below + probs[i];
        total += rewards[i] * (upto.powi(n as i32) - below.powi(n as i32));
        below = upto;
    }
    total
}

/// Summary statistics of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub mean_reward: f64,
    pub max_reward: f64,
    pub std_reward: f64,
    pub tv_to_oracle: Option<f64>,
    pub kl_to_oracle: Option<f64>,
    /// Mean pairwise distance over at most 512 samples.
    pub diversity: f64,
    pub duplicate_fraction: f64,
}

/// Score a sample set; `oracle` is `(empirical law, oracle law)` when available.
pub fn report_metrics<X: Eq + Hash>(
    samples: &[X],
    rewards: &[f64],
    distance: impl Fn(&X, &X) -> f64,
    oracle: Option<(&[f64], &[f64])>,
) -> Result<SampleMetrics> {
    if samples.is_empty() || samples.len() != rewards.len() {
        return Err(invalid("need one reward per sample and at least one sample"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unique = samples.iter().collect::<HashSet<_>>().len();
    let head = &samples[..samples.len().min(512)];
    let mut pairs = 0usize;
    let mut dist = 0.0;
    for i in 0..head.len() {
        for j in i + 1..head.len() {
            dist += distance(&head[i], &head[j]);
            pairs += 1;
        }
    }
    let (tv, kl) = match oracle {
        Some((emp, truth)) => (Some(tv_distance(emp, truth)?), Some(kl_divergence(emp, truth)?)),
        None => (None, None),
    };
    Ok(SampleMetrics {
        mean_reward: mean,
        max_reward: max,
        std_reward: var.sqrt(),
        tv_to_oracle: tv,
        kl_to_oracle: kl,
        diversity: if pairs > 0 { dist / pairs as f64 } else { 0.0 },
        duplicate_fraction: 1.0 - unique as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tilted_binary_example() {
        let sp = SeqSpace::new(2, 1).unwrap();
        let t = brute_force_target(sp, &[0.75, 0.25], |y| y.0[0] as f64, 1.0).unwrap();
        assert!((t.log_z - (0.75 + 0.25 * std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((t.probs[0] - 0.5246).abs() < 1e-4 && (t.probs[1] - 0.4754).abs() < 1e-4);
    }

    #[test]
    fn ess_example() {
        let lw: Vec<f64> = [2.0f64, 1.0, 1.0].iter().map(|w| w.ln()).collect();
        assert!((ess(&lw).unwrap() - 16.0 / 6.0).abs() < 1e-12);
        assert!(ess(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn tv_example() {
        let tv = tv_distance(&[0.75, 0.25], &[0.5246, 0.4754]).unwrap();
        assert!((tv - 0.2254).abs() < 1e-12);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn best_of_two_example() {
        assert!((expected_best_of_n(&[0.75, 0.25], &[0.0, 1.0], 2) - 0.4375).abs() < 1e-15);
    }

    #[test]
    fn grid_target_of_tilted_normal() {
        // N(0,1) tilted by exp(x) is N(1,1) with log Z = 1/2.
        let g = grid_target(&GaussianMixture::standard(1).unwrap(), |x| x, 1.0, -10.0, 12.0, 4096).unwrap();
        assert!((g.expectation(|x| *x) - 1.0).abs() < 1e-6);
        assert!((g.log_z - 0.5).abs() < 1e-6);
    }

    #[test]
    fn metrics_report_duplicates() {
        let xs = vec![1u8, 1, 2, 3];
        let m = report_metrics(&xs, &[0.0, 0.0, 1.0, 3.0], |a, b| f64::from(u8::from(a != b)), None).unwrap();
        assert_eq!(m.duplicate_fraction, 0.25);
        assert_eq!(m.max_reward, 3.0);
        assert!((m.mean_reward - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ess_is_bounded(lw in proptest::collection::vec(-30.0f64..30.0, 1..64)) {
            let e = ess(&lw).unwrap();
            prop_assert!(e >= 1.0 - 1e-12 && e <= lw.len() as f64 + 1e-9);
        }

        #[test]
        fn ess_of_equal_weights_is_n(c in -50.0f64..50.0, n in 1usize..100) {
            prop_assert!((ess(&vec![c; n]).unwrap() - n as f64).abs() < 1e-9);
        }

        #[test]
        fn target_normalizes_with_consistent_log_z(
            pre in proptest::collection::vec(0.01f64..1.0, 4),
            r in proptest::collection::vec(-3.0f64..3.0, 4),
            alpha in 0.1f64..5.0,
        ) {
            let sp = SeqSpace::new(2, 2).unwrap();
            let s: f64 = pre.iter().sum();
            let pre: Vec<f64> = pre.iter().map(|p| p / s).collect();
            let t = brute_force_target(sp, &pre, |y| r[sp.clean_index(y)], alpha).unwrap();
            prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let z: f64 = pre.iter().zip(&r).map(|(p, v)| p * (v / alpha).exp()).sum();
            prop_assert!((t.log_z - z.ln()).abs() < 1e-12);
        }
    }
}
