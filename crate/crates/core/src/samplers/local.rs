use rayon::prelude::*;

use super::smc::{proposal_log_ratio, propose};
use super::{categorical, initial_state, normalize, step_rng, GuidanceConfig, SamplerReport};
use crate::error::{Error, Result};
use crate::processes::{Kernel, Process};
use crate::rng::Purpose;
use crate::values::ValueModel;

/// One particle of value-based local selection from `(t_start, x)` down to `t = 0`.
///
/// Returns the final state, the mean local `ESS / M` and, if asked, the path
/// indexed by `t`.
pub fn svdd_chain<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &GuidanceConfig,
    lane: usize,
    t_start: usize,
    mut x: P::State,
    record: bool,
) -> Result<(P::State, f64, Option<Vec<P::State>>)> {
    let m = cfg.candidates;
    let mut local = 0.0;
    let mut path = record.then(|| vec![x.clone()]);
    for t in (1..=t_start).rev() {
        let mut rng = step_rng(cfg.seed, lane, t, Purpose::Propose);
        let mut cands = Vec::with_capacity(m);
        let mut vals = Vec::with_capacity(m);
        for _ in 0..m {
            let y = propose(process, proposal, t, &x, &mut rng)?;
            vals.push(values.value(t - 1, &y)?);
            cands.push(y);
        }
        let j = if cfg.alpha == 0.0 {
            local += 1.0 / m as f64;
            (0..m).fold(0, |b, k| if vals[k] > vals[b] { k } else { b })
        } else {
            let mut lw = Vec::with_capacity(m);
            for (y, v) in cands.iter().zip(&vals) {
                lw.push(v / cfg.alpha + proposal_log_ratio(process, proposal, t, y, &x)?);
            }
            let probs = normalize(&lw).ok_or(Error::DegenerateWeights { step: t })?;
            local += 1.0 / probs.iter().map(|p| p * p).sum::<f64>() / m as f64;
            if m == 1 {
                0
            } else {
                categorical(&probs, &mut step_rng(cfg.seed, lane, t, Purpose::Select))
            }
        };
        x = cands.swap_remove(j);
        if let Some(p) = path.as_mut() {
            p.push(x.clone());
        }
    }
    let path = path.map(|mut p| {
        p.reverse();
        p
    });
    Ok((x, local / t_start.max(1) as f64, path))
}

fn run<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &GuidanceConfig,
    record: bool,
) -> Result<(SamplerReport<P::State>, Vec<Vec<P::State>>)> {
    cfg.validate()?;
    let steps = process.steps();
    let runs: Vec<_> = (0..cfg.particles)
        .into_par_iter()
        .map(|i| svdd_chain(process, values, proposal, cfg, i, steps, initial_state(process, cfg.seed, i), record))
        .collect::<Result<_>>()?;
    let local = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
    let mut samples = Vec::with_capacity(runs.len());
    let mut paths = Vec::new();
    for (x, _, p) in runs {
        samples.push(x);
        paths.extend(p);
    }
    let mut report = SamplerReport::plain(samples);
    report.local_ess = Some(local);
    Ok((report, paths))
}

/// Value-based importance sampling: at each step draw `M` candidates per
/// particle and keep one with probability proportional to
/// `exp(v_{t-1}/alpha) p_pre / q`.
///
/// With `alpha = 0` the candidate with the largest value is kept, ties going to
/// the lowest index.
pub fn svdd<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &GuidanceConfig,
) -> Result<SamplerReport<P::State>> {
    run(process, values, proposal, cfg, false).map(|r| r.0)
}

/// [`svdd`] that also returns every particle's path indexed by `t`.
pub fn svdd_paths<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &GuidanceConfig,
) -> Result<(SamplerReport<P::State>, Vec<Vec<P::State>>)> {
    run(process, values, proposal, cfg, true)
}

/// Beam search over soft values: keep the best of `M` candidates at every step.
pub fn beam_search<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &GuidanceConfig,
) -> Result<SamplerReport<P::State>> {
    svdd(process, values, proposal, &GuidanceConfig { alpha: 0.0, ..*cfg })
}
