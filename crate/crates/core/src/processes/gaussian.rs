//! Continuous Gaussian diffusion with a diagonal Gaussian-mixture data law.

use rand::Rng;
use rand_distr::StandardNormal;

use super::schedule::NoiseSchedule;
use super::Process;
use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;

/// A point in `R^d`.
pub type ContinuousState = Vec<f64>;

/// One diagonal Gaussian component. A zero variance is a point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Diagonal Gaussian mixture data law.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    dim: usize,
}

/// Posterior of `x_0` given `x_t` under the mixture.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    /// Component responsibilities.
    pub resp: Vec<f64>,
    /// Per-component conditional means of `x_0`.
    pub means: Vec<Vec<f64>>,
    /// Per-component conditional variances of `x_0`.
    pub vars: Vec<Vec<f64>>,
    /// Per-component log marginal density of `x_t` including the log weight.
    pub log_joint: Vec<f64>,
    /// Per-component marginal variance of `x_t`.
    pub pred_var: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let dim = components.first().map(|c| c.mean.len()).ok_or_else(|| invalid("empty mixture"))?;
        if dim == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &components {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(invalid("mixture components disagree on dimension"));
            }
            if !(c.weight >= 0.0) || c.var.iter().any(|&v| !(v >= 0.0)) {
                return Err(invalid("mixture weights and variances must be non-negative"));
            }
        }
        if !(total > 0.0) {
            return Err(invalid("mixture weights sum to zero"));
        }
        let components = components
            .into_iter()
            .map(|c| MixtureComponent { weight: c.weight / total, ..c })
            .collect();
        Ok(Self { components, dim })
    }

    /// Isotropic standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![MixtureComponent { weight: 1.0, mean: vec![0.0; dim], var: vec![1.0; dim] }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Normalized component responsibilities given `x_t = x` at level `abar`.
    /// Cheaper than [`Self::posterior`] when only the weights are needed.
    pub fn responsibilities(&self, abar: f64, x: &[f64]) -> Vec<f64> {
        let sa = abar.sqrt();
        let mut w: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let mut lj = c.weight.ln();
                for d in 0..self.dim {
                    let pred = (abar * c.var[d] + 1.0 - abar).max(1e-300);
                    let r = x[d] - sa * c.mean[d];
                    lj -= 0.5 * (r * r / pred + (2.0 * std::f64::consts::PI * pred).ln());
                }
                lj
            })
            .collect();
        let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in w.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        for l in w.iter_mut() {
            *l /= z;
        }
        w
    }

    /// Posterior of `x_0` given `x_t = x` at level `abar`.
    pub fn posterior(&self, abar: f64, x: &[f64]) -> MixturePosterior {
        let sa = abar.sqrt();
        let n = self.components.len();
        let mut out = MixturePosterior {
            resp: Vec::with_capacity(n),
            means: Vec::with_capacity(n),
            vars: Vec::with_capacity(n),
            log_joint: Vec::with_capacity(n),
            pred_var: Vec::with_capacity(n),
        };
        for c in &self.components {
            let mut lj = c.weight.ln();
            let mut m = Vec::with_capacity(self.dim);
            let mut v = Vec::with_capacity(self.dim);
            let mut pv = Vec::with_capacity(self.dim);
            for d in 0..self.dim {
                let s2 = c.var[d];
                let pred = (abar * s2 + 1.0 - abar).max(1e-300);
                let r = x[d] - sa * c.mean[d];
                lj += -0.5 * (r * r / pred + (2.0 * std::f64::consts::PI * pred).ln());
                m.push(c.mean[d] + sa * s2 / pred * r);
                v.push(s2 * (1.0 - abar) / pred);
                pv.push(pred);
            }
            out.log_joint.push(lj);
            out.means.push(m);
            out.vars.push(v);
            out.pred_var.push(pv);
        }
        let mx = out.log_joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = out.log_joint.iter().map(|l| (l - mx).exp()).sum();
        out.resp = out.log_joint.iter().map(|l| (l - mx).exp() / z).collect();
        out
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        let mut u = rng.random::<f64>();
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            if u < c.weight {
                pick = i;
                break;
            }
            u -= c.weight;
        }
        let c = &self.components[pick];
        (0..self.dim)
            .map(|d| c.mean[d] + c.var[d].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// The law convolved with `N(0, sigma2 I)`.
    pub fn smoothed(&self, sigma2: f64) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| MixtureComponent { var: c.var.iter().map(|v| v + sigma2).collect(), ..c.clone() })
            .collect();
        Self { components, dim: self.dim }
    }

    /// Gradient of the log density (all variances must be positive).
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let post = self.posterior(1.0, x);
        let mut out = vec![0.0; self.dim];
        for ((r, c), pv) in post.resp.iter().zip(&self.components).zip(&post.pred_var) {
            for d in 0..self.dim {
                out[d] -= r * (x[d] - c.mean[d]) / pv[d];
            }
        }
        out
    }

    /// Log density of the data law (all variances must be positive).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let lj = self.posterior(1.0, x).log_joint;
        let mx = lj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + lj.iter().map(|l| (l - mx).exp()).sum::<f64>().ln()
    }
}

/// Which quantity a network output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    X0,
    Epsilon,
    Score,
}

/// A denoiser output expressed in all three parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTriple {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub score: Vec<f64>,
}

/// Convert between clean-sample, noise and score predictions at level `abar`.
pub fn param_convert(kind: Parameterization, value: &[f64], x_t: &[f64], abar: f64) -> Result<ParamTriple> {
    if !(abar > 0.0 && abar < 1.0) {
        return Err(invalid("conversion needs abar in (0, 1)"));
    }
    if value.len() != x_t.len() {
        return Err(invalid("prediction and state dimensions differ"));
    }
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let eps: Vec<f64> = match kind {
        Parameterization::Epsilon => value.to_vec(),
        Parameterization::X0 => value.iter().zip(x_t).map(|(x0, x)| (x - sa * x0) / sb).collect(),
        Parameterization::Score => value.iter().map(|s| -s * sb).collect(),
    };
    let x0 = eps.iter().zip(x_t).map(|(e, x)| (x - sb * e) / sa).collect();
    let score = eps.iter().map(|e| -e / sb).collect();
    Ok(ParamTriple { x0, eps, score })
}

/// Mean and variance of the Gaussian backward step given a clean prediction.
pub fn gaussian_backward_step(
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &[f64],
    x0_hat: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let ab = schedule.alpha_bar(t);
    if 1.0 - ab <= 0.0 {
        return Err(Error::DegenerateStep { t });
    }
    let ab_prev = schedule.alpha_bar(t - 1);
    let a = schedule.alpha(t);
    let c_x = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let c_0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
    let mean = x_t.iter().zip(x0_hat).map(|(x, x0)| c_x * x + c_0 * x0).collect();
    Ok((mean, schedule.sigma2(t)))
}

/// Log density of an isotropic Gaussian; a zero variance is a point mass
/// whose log density is taken as 0 on its atom.
pub fn isotropic_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    if var <= 0.0 {
        let hit = x.iter().zip(mean).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        return if hit { 0.0 } else { f64::NEG_INFINITY };
    }
    let q: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * (q / var + x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln())
}

/// Pre-trained Gaussian diffusion whose denoiser is the exact mixture posterior mean.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    schedule: NoiseSchedule,
    data: GaussianMixture,
}

impl GaussianProcess {
    pub fn new(schedule: NoiseSchedule, data: GaussianMixture) -> Self {
        Self { schedule, data }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn data(&self) -> &GaussianMixture {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim
    }

    /// Exact posterior mean `E[x_0 | x_t]`.
    pub fn denoiser(&self, t: usize, x: &[f64]) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(t);
        let sa = ab.sqrt();
        let resp = self.data.responsibilities(ab, x);
        let mut out = vec![0.0; self.dim()];
        for (r, c) in resp.iter().zip(self.data.components()) {
            for d in 0..out.len() {
                let pred = (ab * c.var[d] + 1.0 - ab).max(1e-300);
                out[d] += r * (c.mean[d] + sa * c.var[d] / pred * (x[d] - sa * c.mean[d]));
            }
        }
        out
    }

    /// Exact score of the marginal of `x_t`.
    pub fn score(&self, t: usize, x: &[f64]) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(t);
        let sa = ab.sqrt();
        let resp = self.data.responsibilities(ab, x);
        let mut out = vec![0.0; self.dim()];
        for (r, c) in resp.iter().zip(self.data.components()) {
            for d in 0..out.len() {
                let pred = (ab * c.var[d] + 1.0 - ab).max(1e-300);
                out[d] -= r * (x[d] - sa * c.mean[d]) / pred;
            }
        }
        out
    }

    /// Mean and variance of the pre-trained backward step.
    pub fn step_moments(&self, t: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        gaussian_backward_step(&self.schedule, t, x, &self.denoiser(t, x))
    }
}

pub(crate) fn gaussian_draw(mean: &[f64], var: f64, rng: &mut StreamRng) -> Vec<f64> {
    let sd = var.max(0.0).sqrt();
    mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl Process for GaussianProcess {
    type State = ContinuousState;

    fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> ContinuousState {
        (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn initial_is_deterministic(&self) -> bool {
        false
    }

    fn sample_step(&self, t: usize, x: &ContinuousState, rng: &mut StreamRng) -> Result<ContinuousState> {
        let (mean, var) = self.step_moments(t, x)?;
        Ok(gaussian_draw(&mean, var, rng))
    }

    fn log_prob_step(&self, t: usize, next: &ContinuousState, prev: &ContinuousState) -> Result<f64> {
        let (mean, var) = self.step_moments(t, prev)?;
        Ok(isotropic_log_density(next, &mean, var))
    }

    fn forward_sample(&self, x0: &ContinuousState, t: usize, rng: &mut StreamRng) -> Result<ContinuousState> {
        let ab = self.schedule.alpha_bar(t);
        let mean: Vec<f64> = x0.iter().map(|v| ab.sqrt() * v).collect();
        Ok(gaussian_draw(&mean, 1.0 - ab, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::schedule::ScheduleKind;
    use proptest::prelude::*;

    #[test]
    fn eps_to_x0_example() {
        let p = param_convert(Parameterization::Epsilon, &[0.5], &[1.0], 0.25).unwrap();
        assert!((p.x0[0] - 1.133_974_596_215_561).abs() < 1e-12);
    }

    #[test]
    fn conversion_rejects_endpoints() {
        assert!(param_convert(Parameterization::X0, &[0.0], &[1.0], 1.0).is_err());
        assert!(param_convert(Parameterization::X0, &[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn backward_step_example() {
        // alpha_t = 0.9, abar_{t-1} = 0.81.
        let sch = NoiseSchedule::from_alpha_bar(vec![1.0, 0.81, 0.729]).unwrap();
        let (m, v) = gaussian_backward_step(&sch, 2, &[1.0], &[0.5]).unwrap();
        assert!((m[0] - 0.831_180_172_064_935_8).abs() < 1e-12);
        assert!((v - 0.070_110_701_107_011_08).abs() < 1e-12);
    }

    #[test]
    fn identity_step_keeps_state() {
        let sch = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).unwrap();
        let (m, v) = gaussian_backward_step(&sch, 2, &[0.7], &[-3.0]).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-15);
        assert_eq!(v, 0.0);
    }

    fn two_modes() -> GaussianMixture {
        GaussianMixture::new(vec![
            MixtureComponent { weight: 0.3, mean: vec![-1.5], var: vec![0.2] },
            MixtureComponent { weight: 0.7, mean: vec![1.0], var: vec![0.5] },
        ])
        .unwrap()
    }

    /// Posterior mean by Simpson quadrature over `x_0`.
    fn quadrature_denoiser(mix: &GaussianMixture, abar: f64, x: f64) -> f64 {
        let (lo, hi, n) = (-12.0, 12.0, 40_000);
        let h = (hi - lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x0 = lo + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let lik = (-(x - abar.sqrt() * x0).powi(2) / (2.0 * (1.0 - abar))).exp();
            let p = mix.log_density(&[x0]).exp() * lik * w;
            num += x0 * p;
            den += p;
        }
        num / den
    }

    #[test]
    fn denoiser_matches_quadrature() {
        let sch = NoiseSchedule::from_alpha_bar(vec![1.0, 0.8, 0.4, 0.05]).unwrap();
        let g = GaussianProcess::new(sch, two_modes());
        for t in 1..=3 {
            for x in [-2.0, -0.3, 0.4, 1.7] {
                let want = quadrature_denoiser(g.data(), g.schedule().alpha_bar(t), x);
                assert!((g.denoiser(t, &[x])[0] - want).abs() < 1e-8, "t={t} x={x}");
            }
        }
    }

    proptest! {
        #[test]
        fn parameterizations_round_trip(x in -3.0f64..3.0, v in -3.0f64..3.0, abar in 0.01f64..0.99) {
            let a = param_convert(Parameterization::X0, &[v], &[x], abar).unwrap();
            let b = param_convert(Parameterization::Epsilon, &a.eps, &[x], abar).unwrap();
            let c = param_convert(Parameterization::Score, &b.score, &[x], abar).unwrap();
            prop_assert!((c.x0[0] - v).abs() < 1e-10 * (1.0 + v.abs()) / abar.sqrt());
        }

        #[test]
        fn score_agrees_with_denoiser(x in -3.0f64..3.0, t in 1usize..=20) {
            let sch = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
            let g = GaussianProcess::new(sch, two_modes());
            let ab = g.schedule().alpha_bar(t);
            let via = param_convert(Parameterization::X0, &g.denoiser(t, &[x]), &[x], ab).unwrap();
            prop_assert!((via.score[0] - g.score(t, &[x])[0]).abs() < 1e-10 / (1.0 - ab));
        }
    }
}
