use crate::error::{invalid, Result};
use crate::oracle_metrics::logsumexp;
use crate::processes::{ContinuousState, GaussianProcess};

use super::{ContinuousValue, Provenance, ValueModel};

/// Exact soft value of a linear reward under a Gaussian-mixture data law.
///
/// Uses the posterior of `x_0 | x_t` under the forward noising law, where a
/// linear reward has a log-normal moment generating function.
#[derive(Debug, Clone)]
pub struct GaussianTiltValue<'a> {
    process: &'a GaussianProcess,
    coef: Vec<f64>,
    offset: f64,
    alpha: f64,
}

impl<'a> GaussianTiltValue<'a> {
    pub fn new(process: &'a GaussianProcess, coef: Vec<f64>, offset: f64, alpha: f64) -> Result<Self> {
        if coef.len() != process.dim() {
            return Err(invalid("reward coefficients do not match the state dimension"));
        }
        if !(alpha > 0.0) {
            return Err(invalid("alpha must be positive"));
        }
        Ok(Self { process, coef, offset, alpha })
    }

    /// `c m + c^2 s^2 / (2 alpha)` for a single Gaussian posterior `N(m, s^2)`.
    pub fn single(c: f64, m: f64, s2: f64, alpha: f64) -> f64 {
        c * m + c * c * s2 / (2.0 * alpha)
    }

    /// Per-component log joint of `x_t = x` and the same plus the log moment
    /// generating function of the reward under that component's posterior.
    fn tilted_logits(&self, t: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ab = self.process.schedule().alpha_bar(t);
        let sa = ab.sqrt();
        let comps = self.process.data().components();
        let mut base = Vec::with_capacity(comps.len());
        let mut tilted = Vec::with_capacity(comps.len());
        for c in comps {
            let (mut lj, mut lift) = (c.weight.ln(), 0.0);
            for d in 0..x.len() {
                let pred = (ab * c.var[d] + 1.0 - ab).max(1e-300);
                let r = x[d] - sa * c.mean[d];
                lj -= 0.5 * (r * r / pred + (2.0 * std::f64::consts::PI * pred).ln());
                let (m, v) = (c.mean[d] + sa * c.var[d] / pred * r, c.var[d] * (1.0 - ab) / pred);
                let k = self.coef[d];
                lift += k * m / self.alpha + k * k * v / (2.0 * self.alpha * self.alpha);
            }
            base.push(lj);
            tilted.push(lj + lift);
        }
        (base, tilted)
    }
}

impl ValueModel<ContinuousState> for GaussianTiltValue<'_> {
    fn value(&self, t: usize, x: &ContinuousState) -> Result<f64> {
        if x.len() != self.coef.len() {
            return Err(invalid("state dimension does not match the reward"));
        }
        if t == 0 {
            return Ok(self.offset + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>());
        }
        let (base, tilted) = self.tilted_logits(t, x);
        Ok(self.offset + self.alpha * (logsumexp(&tilted) - logsumexp(&base)))
    }

    fn provenance(&self) -> Provenance {
        Provenance::ClosedForm
    }
}

impl ContinuousValue for GaussianTiltValue<'_> {
    fn gradient(&self, t: usize, x: &ContinuousState) -> Result<Vec<f64>> {
        if t == 0 {
            return Ok(self.coef.clone());
        }
        let ab = self.process.schedule().alpha_bar(t);
        let sa = ab.sqrt();
        let (base, tilted) = self.tilted_logits(t, x);
        let (zb, zt) = (logsumexp(&base), logsumexp(&tilted));
        let comps = self.process.data().components();
        Ok((0..x.len())
            .map(|d| {
                let mut g = 0.0;
                for k in 0..comps.len() {
                    let pv = (ab * comps[k].var[d] + 1.0 - ab).max(1e-300);
                    let dl = -(x[d] - sa * comps[k].mean[d]) / pv;
                    let dm = sa * comps[k].var[d] / pv;
                    g += (tilted[k] - zt).exp() * (dl + self.coef[d] * dm / self.alpha);
                    g -= (base[k] - zb).exp() * dl;
                }
                self.alpha * g
            })
            .collect())
    }
}
