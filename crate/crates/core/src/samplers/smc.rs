use rayon::prelude::*;

use super::{categorical, initial_state, normalize, resample, step_rng, GuidanceConfig, SamplerReport};
use crate::error::{invalid, Error, Result};
use crate::oracle_metrics::{ess, logsumexp};
use crate::processes::{Kernel, Process};
use crate::rng::Purpose;
use crate::values::ValueModel;

/// Log-weight of one proposal draw relative to the pre-trained kernel.
pub(crate) fn proposal_log_ratio<P: Process>(
    process: &P,
    proposal: Option<&dyn Kernel<P::State>>,
    t: usize,
    next: &P::State,
    prev: &P::State,
) -> Result<f64> {
    match proposal {
        None => Ok(0.0),
        Some(q) => Ok(process.log_prob_step(t, next, prev)? - q.log_prob(t, next, prev)?),
    }
}

pub(crate) fn propose<P: Process>(
    process: &P,
    proposal: Option<&dyn Kernel<P::State>>,
    t: usize,
    x: &P::State,
    rng: &mut crate::rng::StreamRng,
) -> Result<P::State> {
    match proposal {
        None => process.sample_step(t, x, rng),
        Some(q) => q.sample(t, x, rng),
    }
}

struct Population<S> {
    states: Vec<S>,
    log_w: Vec<f64>,
    log_z: f64,
    ess_trace: Vec<f64>,
    resampled_at: Vec<usize>,
}

impl<S: Clone> Population<S> {
    /// Fold incremental log-weights in, update the normalizer and resample if needed.
    fn reweight(&mut self, inc: &[f64], step: usize, cfg: &GuidanceConfig) -> Result<()> {
        let prev = normalize(&self.log_w).ok_or(Error::DegenerateWeights { step })?;
        let terms: Vec<f64> = prev.iter().zip(inc).map(|(p, l)| p.ln() + l).collect();
        self.log_z += logsumexp(&terms);
        for (w, l) in self.log_w.iter_mut().zip(inc) {
            *w += l;
        }
        let e = ess(&self.log_w).map_err(|_| Error::DegenerateWeights { step })?;
        self.ess_trace.push(e);
        if e < cfg.ess_threshold * self.states.len() as f64 {
            let probs = normalize(&self.log_w).ok_or(Error::DegenerateWeights { step })?;
            let idx = resample(&probs, cfg.resampling, &mut step_rng(cfg.seed, 0, step, Purpose::Resample));
            self.states = idx.iter().map(|&i| self.states[i].clone()).collect();
            self.log_w = vec![0.0; self.states.len()];
            self.resampled_at.push(step);
        }
        Ok(())
    }

    fn finish(mut self, cfg: &GuidanceConfig) -> Result<SamplerReport<S>> {
        if self.log_w.iter().any(|&w| w != self.log_w[0]) {
            let probs = normalize(&self.log_w).ok_or(Error::DegenerateWeights { step: 0 })?;
            let idx = resample(&probs, cfg.resampling, &mut step_rng(cfg.seed, 0, 0, Purpose::Resample));
            self.states = idx.iter().map(|&i| self.states[i].clone()).collect();
        }
        Ok(SamplerReport {
            samples: self.states,
            ess_trace: self.ess_trace,
            resampled_at: self.resampled_at,
            log_z: Some(self.log_z),
            local_ess: None,
        })
    }
}

fn start<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    cfg: &GuidanceConfig,
) -> Result<(Population<P::State>, Vec<f64>)> {
    if !(cfg.alpha > 0.0) {
        return Err(invalid("SMC-type samplers need alpha > 0"));
    }
    let steps = process.steps();
    let states: Vec<P::State> = (0..cfg.particles).into_par_iter().map(|i| initial_state(process, cfg.seed, i)).collect();
    let cur: Vec<f64> = states.par_iter().map(|x| values.value(steps, x).map(|v| v / cfg.alpha)).collect::<Result<_>>()?;
    let mut pop =
        Population { states, log_w: vec![0.0; cfg.particles], log_z: 0.0, ess_trace: Vec::new(), resampled_at: Vec::new() };
    pop.reweight(&cur, steps + 1, cfg)?;
    Ok((pop, cur))
}

/// Sequential Monte Carlo with value-twisted weights.
///
/// Weights start at `exp(v_T(x_T)/alpha)` and are multiplied each step by
/// `exp(v_{t-1}/alpha) p_pre / (exp(v_t/alpha) q)`. They reset to one after
/// every resampling. The normalizer estimate multiplies the weighted means of
/// the incremental weights.
pub fn smc_guidance<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &GuidanceConfig,
) -> Result<SamplerReport<P::State>> {
    cfg.validate()?;
    let (mut pop, _) = start(process, values, cfg)?;
    for t in (1..=process.steps()).rev() {
        let stepped: Vec<(P::State, f64)> = pop
            .states
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let y = propose(process, proposal, t, x, &mut step_rng(cfg.seed, i, t, Purpose::Propose))?;
                let inc = (values.value(t - 1, &y)? - values.value(t, x)?) / cfg.alpha
                    + proposal_log_ratio(process, proposal, t, &y, x)?;
                Ok((y, inc))
            })
            .collect::<Result<_>>()?;
        let (states, inc): (Vec<_>, Vec<_>) = stepped.into_iter().unzip();
        pop.states = states;
        pop.reweight(&inc, t, cfg)?;
    }
    pop.finish(cfg)
}

/// Nested SMC: value-weighted local selection among `M` candidates inside a
/// globally reweighted and resampled population.
///
/// The global weight of a particle is the local mean weight divided by
/// `exp(v_t(x_t)/alpha)`, which makes `M = 1` coincide with [`smc_guidance`].
pub fn nested_smc<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &GuidanceConfig,
) -> Result<SamplerReport<P::State>> {
    cfg.validate()?;
    let (mut pop, _) = start(process, values, cfg)?;
    let m = cfg.candidates;
    let mut local = Vec::new();
    for t in (1..=process.steps()).rev() {
        let stepped: Vec<(P::State, f64, f64)> = pop
            .states
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = step_rng(cfg.seed, i, t, Purpose::Propose);
                let mut cands = Vec::with_capacity(m);
                let mut lw = Vec::with_capacity(m);
                for _ in 0..m {
                    let y = propose(process, proposal, t, x, &mut rng)?;
                    lw.push(values.value(t - 1, &y)? / cfg.alpha + proposal_log_ratio(process, proposal, t, &y, x)?);
                    cands.push(y);
                }
                let probs = normalize(&lw).ok_or(Error::DegenerateWeights { step: t })?;
                let j = if m == 1 { 0 } else { categorical(&probs, &mut step_rng(cfg.seed, i, t, Purpose::Select)) };
                let inc = logsumexp(&lw) - (m as f64).ln() - values.value(t, x)? / cfg.alpha;
                let local_ess = 1.0 / probs.iter().map(|p| p * p).sum::<f64>() / m as f64;
                Ok((cands.swap_remove(j), inc, local_ess))
            })
            .collect::<Result<_>>()?;
        let mut inc = Vec::with_capacity(stepped.len());
        pop.states = stepped
            .into_iter()
            .map(|(y, w, e)| {
                inc.push(w);
                local.push(e);
                y
            })
            .collect();
        pop.reweight(&inc, t, cfg)?;
    }
    let mut report = pop.finish(cfg)?;
    report.local_ess = Some(local.iter().sum::<f64>() / local.len().max(1) as f64);
    Ok(report)
}
