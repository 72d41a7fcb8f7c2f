use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry_so3::RotationState;
use crate::oracle_metrics::logsumexp;
use crate::processes::{ContinuousState, DiscreteSequence, Process};
use crate::rewards::Reward;
use crate::rng::{stream, Purpose};

use super::{ContinuousValue, Provenance, ValueModel};

/// Floor applied to fitted `exp(v/alpha)` before taking the log.
pub const EXP_FLOOR: f64 = 1e-12;
const CHUNK: usize = 256;

/// Hashable identity of a state, used by tabular regression.
pub trait CellKey {
    fn cell_key(&self) -> Vec<u64>;
}

impl CellKey for DiscreteSequence {
    fn cell_key(&self) -> Vec<u64> {
        self.0.iter().map(|&v| v as u64).collect()
    }
}

impl CellKey for ContinuousState {
    fn cell_key(&self) -> Vec<u64> {
        self.iter().map(|v| v.to_bits()).collect()
    }
}

impl CellKey for RotationState {
    fn cell_key(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

/// Feature map `phi(t, x)` for least-squares regression.
pub type FeatureMap<'a, S> = &'a (dyn Fn(usize, &S) -> Vec<f64> + Sync);

/// Function class used by the regression estimators.
#[derive(Clone, Copy)]
pub enum Features<'a, S> {
    /// One free parameter per visited state and step.
    Tabular,
    /// Linear in a user-supplied feature map, fitted separately per step.
    Custom(FeatureMap<'a, S>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub alpha: f64,
    pub rollouts: usize,
    /// Sweeps of soft Q-iteration; defaults to `T`.
    pub iterations: Option<usize>,
    pub seed: u64,
}

enum StepFit {
    /// Per-cell fitted `exp((v - shift)/alpha)`.
    Table(HashMap<Vec<u64>, f64>),
    /// Weights on the feature map for the same quantity.
    Linear(Vec<f64>),
}

/// Values fitted from pre-trained rollouts.
///
/// Cells never visited during fitting defer to `fallback`, and each such call is
/// counted.
pub struct FittedValues<'a, S> {
    alpha: f64,
    shift: f64,
    fits: Vec<Option<StepFit>>,
    features: Features<'a, S>,
    fallback: Box<dyn ValueModel<S> + 'a>,
    provenance: Provenance,
    fallback_hits: AtomicU64,
}

impl<S> FittedValues<'_, S> {
    /// Number of value queries answered by the fallback model.
    pub fn fallback_hits(&self) -> u64 {
        self.fallback_hits.load(Ordering::Relaxed)
    }

    /// Visited cells at step `t` for tabular fits.
    pub fn visited_cells(&self, t: usize) -> usize {
        match self.fits.get(t) {
            Some(Some(StepFit::Table(m))) => m.len(),
            _ => 0,
        }
    }

    fn from_scaled(&self, m: f64) -> f64 {
        self.shift + self.alpha * m.max(EXP_FLOOR).ln()
    }
}

impl<S: CellKey> FittedValues<'_, S> {
    /// Whether `(t, x)` is answered by the fit rather than the fallback.
    pub fn covers(&self, t: usize, x: &S) -> bool {
        match self.fits.get(t) {
            Some(Some(StepFit::Table(m))) => m.contains_key(&x.cell_key()),
            Some(Some(StepFit::Linear(_))) => true,
            _ => false,
        }
    }
}

impl<S: CellKey + Send + Sync> ValueModel<S> for FittedValues<'_, S> {
    fn value(&self, t: usize, x: &S) -> Result<f64> {
        let hit = match (self.fits.get(t), &self.features) {
            (Some(Some(StepFit::Table(m))), _) => m.get(&x.cell_key()).copied(),
            (Some(Some(StepFit::Linear(w))), Features::Custom(phi)) => {
                Some(phi(t, x).iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            }
            _ => None,
        };
        match hit {
            Some(m) => Ok(self.from_scaled(m)),
            None => {
                if t > 0 {
                    self.fallback_hits.fetch_add(1, Ordering::Relaxed);
                }
                self.fallback.value(t, x)
            }
        }
    }

    fn provenance(&self) -> Provenance {
        self.provenance
    }
}

impl ContinuousValue for FittedValues<'_, ContinuousState> {
    fn gradient(&self, t: usize, x: &ContinuousState) -> Result<Vec<f64>> {
        match self.features {
            Features::Tabular => Err(Error::UnsupportedValueModel("tabular fits have no spatial gradient".into())),
            Features::Custom(_) => super::finite_difference(|y| self.value(t, y), x, super::FD_STEP),
        }
    }
}

fn check(opts: &FitOptions) -> Result<()> {
    if !(opts.alpha > 0.0 && opts.alpha.is_finite()) {
        return Err(invalid("fitting needs a finite alpha > 0"));
    }
    if opts.rollouts == 0 {
        return Err(invalid("fitting needs at least one rollout"));
    }
    Ok(())
}

/// Pre-trained trajectory indexed by `t`.
fn rollout<P: Process>(process: &P, seed: u64, lane: u64) -> Result<Vec<P::State>> {
    let steps = process.steps();
    let mut traj = vec![process.sample_initial(&mut stream(seed, lane, steps as u64 + 1, Purpose::Rollout))];
    for t in (1..=steps).rev() {
        let mut rng = stream(seed, lane, t as u64, Purpose::Rollout);
        let next = process.sample_step(t, traj.last().expect("non-empty"), &mut rng)?;
        traj.push(next);
    }
    traj.reverse();
    Ok(traj)
}

/// Sum of `phi phi^T` and of `phi * exp((y - shift)/alpha)`, rescaled when the shift grows.
#[derive(Clone)]
struct Normal {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    shift: f64,
}

impl Normal {
    fn new(dim: usize) -> Self {
        Self { xtx: DMatrix::zeros(dim, dim), xty: DVector::zeros(dim), shift: f64::NEG_INFINITY }
    }

    fn rescale(&mut self, shift: f64, alpha: f64) {
        if shift > self.shift {
            if self.shift.is_finite() {
                self.xty *= ((self.shift - shift) / alpha).exp();
            }
            self.shift = shift;
        }
    }

    fn add(&mut self, phi: &[f64], y: f64, alpha: f64) {
        self.rescale(y, alpha);
        let v = DVector::from_column_slice(phi);
        self.xtx.ger(1.0, &v, &v, 1.0);
        self.xty.axpy(((y - self.shift) / alpha).exp(), &v, 1.0);
    }

    fn merge(&mut self, other: &Normal, alpha: f64) {
        self.rescale(other.shift, alpha);
        self.xtx += &other.xtx;
        if other.shift.is_finite() {
            self.xty.axpy(((other.shift - self.shift) / alpha).exp(), &other.xty, 1.0);
        }
    }

    /// Weights for targets expressed relative to `shift`.
    fn solve(&self, shift: f64, alpha: f64) -> Vec<f64> {
        let n = self.xtx.nrows();
        let ridge = 1e-10 * (self.xtx.trace() / n as f64).max(1e-300);
        let a = &self.xtx + DMatrix::identity(n, n) * ridge;
        let b = if self.shift.is_finite() { &self.xty * ((self.shift - shift) / alpha).exp() } else { self.xty.clone() };
        let w = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a.svd(true, true).solve(&b, 1e-12).unwrap_or_else(|_| DVector::zeros(n)),
        };
        w.iter().copied().collect()
    }
}

enum StepStats {
    /// Per cell: log-sum of `y/alpha` and count.
    Table(HashMap<Vec<u64>, (f64, f64)>),
    Linear(Normal),
}

impl StepStats {
    fn new<S>(features: &Features<'_, S>, dim: usize) -> Self {
        match features {
            Features::Tabular => Self::Table(HashMap::new()),
            Features::Custom(_) => Self::Linear(Normal::new(dim)),
        }
    }

    fn add<S: CellKey>(&mut self, features: &Features<'_, S>, t: usize, x: &S, y: f64, alpha: f64) {
        match (self, features) {
            (Self::Table(m), _) => {
                let e = m.entry(x.cell_key()).or_insert((f64::NEG_INFINITY, 0.0));
                e.0 = logsumexp(&[e.0, y / alpha]);
                e.1 += 1.0;
            }
            (Self::Linear(n), Features::Custom(phi)) => n.add(&phi(t, x), y, alpha),
            _ => unreachable!("stats built for these features"),
        }
    }

    fn merge(&mut self, other: StepStats, alpha: f64) {
        match (self, other) {
            (Self::Table(a), Self::Table(b)) => {
                for (k, (l, c)) in b {
                    let e = a.entry(k).or_insert((f64::NEG_INFINITY, 0.0));
                    e.0 = logsumexp(&[e.0, l]);
                    e.1 += c;
                }
            }
            (Self::Linear(a), Self::Linear(b)) => a.merge(&b, alpha),
            _ => unreachable!("stats built for the same features"),
        }
    }

    fn finish(self, shift: f64, alpha: f64) -> StepFit {
        match self {
            Self::Table(m) => StepFit::Table(
                m.into_iter().map(|(k, (l, c))| (k, (l - c.ln() - shift / alpha).exp())).collect(),
            ),
            Self::Linear(n) => StepFit::Linear(n.solve(shift, alpha)),
        }
    }
}

fn feature_dim<S>(features: &Features<'_, S>, probe: &S) -> usize {
    match features {
        Features::Tabular => 0,
        Features::Custom(phi) => phi(1, probe).len(),
    }
}

/// Monte Carlo regression of `exp(r(x_0)/alpha)` on `x_t` over pre-trained rollouts.
pub fn mc_regression<'a, P, R>(
    process: &P,
    reward: &R,
    fallback: Box<dyn ValueModel<P::State> + 'a>,
    features: Features<'a, P::State>,
    opts: FitOptions,
) -> Result<FittedValues<'a, P::State>>
where
    P: Process,
    P::State: CellKey,
    R: Reward<P::State>,
{
    check(&opts)?;
    let steps = process.steps();
    let probe = process.sample_initial(&mut stream(opts.seed, 0, 0, Purpose::Fit));
    let dim = feature_dim(&features, &probe);
    let chunks: Vec<(Vec<StepStats>, f64)> = (0..opts.rollouts.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| -> Result<(Vec<StepStats>, f64)> {
            let mut stats: Vec<StepStats> = (0..=steps).map(|_| StepStats::new(&features, dim)).collect();
            let mut best = f64::NEG_INFINITY;
            for s in c * CHUNK..((c + 1) * CHUNK).min(opts.rollouts) {
                let traj = rollout(process, opts.seed, s as u64)?;
                let y = reward.reward(&traj[0]);
                best = best.max(y);
                for t in 1..=steps {
                    stats[t].add(&features, t, &traj[t], y, opts.alpha);
                }
            }
            Ok((stats, best))
        })
        .collect::<Result<_>>()?;
    let mut iter = chunks.into_iter();
    let (mut stats, mut shift) = iter.next().expect("at least one chunk");
    for (s, b) in iter {
        shift = shift.max(b);
        for (acc, st) in stats.iter_mut().zip(s) {
            acc.merge(st, opts.alpha);
        }
    }
    let fits = stats
        .into_iter()
        .enumerate()
        .map(|(t, s)| (t > 0).then(|| s.finish(shift, opts.alpha)))
        .collect();
    Ok(FittedValues {
        alpha: opts.alpha,
        shift,
        fits,
        features,
        fallback,
        provenance: Provenance::MonteCarloRegression,
        fallback_hits: AtomicU64::new(0),
    })
}

/// Soft Q-iteration: repeatedly regress `exp(f_{t-1}(x_{t-1})/alpha)` on `x_t`.
///
/// The first sweep bootstraps from `fallback`; after `T` sweeps the boundary
/// reward has propagated to every step.
pub fn soft_q_iteration<'a, P, R>(
    process: &P,
    reward: &R,
    fallback: Box<dyn ValueModel<P::State> + 'a>,
    features: Features<'a, P::State>,
    opts: FitOptions,
) -> Result<FittedValues<'a, P::State>>
where
    P: Process,
    P::State: CellKey,
    R: Reward<P::State>,
{
    check(&opts)?;
    let steps = process.steps();
    let sweeps = opts.iterations.unwrap_or(steps).max(1);
    let trajs: Vec<Vec<P::State>> =
        (0..opts.rollouts).into_par_iter().map(|s| rollout(process, opts.seed, s as u64)).collect::<Result<_>>()?;
    let terminal: Vec<f64> = trajs.iter().map(|tr| reward.reward(&tr[0])).collect();
    let shift = terminal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dim = feature_dim(&features, &trajs[0][0]);
    let mut model = FittedValues {
        alpha: opts.alpha,
        shift,
        fits: (0..=steps).map(|_| None).collect(),
        features,
        fallback,
        provenance: Provenance::SoftQIteration,
        fallback_hits: AtomicU64::new(0),
    };
    for _ in 0..sweeps {
        let mut next = Vec::with_capacity(steps + 1);
        next.push(None);
        for t in 1..=steps {
            let parts: Vec<StepStats> = trajs
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(c, block)| -> Result<StepStats> {
                    let mut st = StepStats::new(&model.features, dim);
                    for (i, tr) in block.iter().enumerate() {
                        let y = if t == 1 { terminal[c * CHUNK + i] } else { model.value(t - 1, &tr[t - 1])? };
                        st.add(&model.features, t, &tr[t], y, opts.alpha);
                    }
                    Ok(st)
                })
                .collect::<Result<_>>()?;
            let mut parts = parts.into_iter();
            let mut acc = parts.next().expect("at least one chunk");
            for p in parts {
                acc.merge(p, opts.alpha);
            }
            next.push(Some(acc.finish(shift, opts.alpha)));
        }
        model.fits = next;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::{GaussianMixture, GaussianProcess, MaskedProcess, NoiseSchedule, ScheduleKind, SeqSpace};
    use crate::rewards::RewardModel;
    use crate::values::{ExactValues, GaussianTiltValue, PosteriorMeanValue};

    fn binary() -> (MaskedProcess, RewardModel) {
        let sp = SeqSpace::new(2, 1).unwrap();
        let m = MaskedProcess::new(NoiseSchedule::new(ScheduleKind::Cosine, 8).unwrap(), sp, vec![0.75, 0.25]).unwrap();
        let r = RewardModel::table(sp, &[("B".parse().unwrap(), 1.0)], 0.0).unwrap();
        (m, r)
    }

    #[test]
    fn tabular_fits_track_exact_values() {
        let (m, r) = binary();
        let exact = ExactValues::build(&m, &r, 1.0).unwrap();
        let opts = FitOptions { alpha: 1.0, rollouts: 20_000, iterations: None, seed: 11 };
        let mc = mc_regression(&m, &r, Box::new(PosteriorMeanValue::new(&m, &r)), Features::Tabular, opts).unwrap();
        let fq = soft_q_iteration(&m, &r, Box::new(PosteriorMeanValue::new(&m, &r)), Features::Tabular, opts).unwrap();
        let x: DiscreteSequence = "*".parse().unwrap();
        for t in 1..=8 {
            let want = exact.value(t, &x).unwrap();
            assert!((mc.value(t, &x).unwrap() - want).abs() < 0.05, "mc t={t}");
            assert!((fq.value(t, &x).unwrap() - want).abs() < 0.05, "fqi t={t}");
        }
        assert_eq!(mc.fallback_hits(), 0);
    }

    #[test]
    fn unseen_cells_use_fallback() {
        let (m, r) = binary();
        let opts = FitOptions { alpha: 1.0, rollouts: 10, iterations: Some(1), seed: 3 };
        let mc = mc_regression(&m, &r, Box::new(PosteriorMeanValue::new(&m, &r)), Features::Tabular, opts).unwrap();
        // A clean state at t = T is essentially never visited.
        let v = mc.value(8, &"B".parse().unwrap()).unwrap();
        assert_eq!(v, 1.0);
        assert!(mc.fallback_hits() >= 1);
    }

    #[test]
    fn constant_reward_gives_constant_values() {
        let sp = SeqSpace::new(2, 2).unwrap();
        let m = MaskedProcess::new(NoiseSchedule::new(ScheduleKind::Linear, 6).unwrap(), sp, vec![0.4, 0.1, 0.15, 0.35]).unwrap();
        let r = RewardModel::Table { space: sp, values: vec![0.7; 4] };
        let opts = FitOptions { alpha: 0.5, rollouts: 500, iterations: None, seed: 1 };
        let fq = soft_q_iteration(&m, &r, Box::new(PosteriorMeanValue::new(&m, &r)), Features::Tabular, opts).unwrap();
        for i in 0..sp.full_size() {
            for t in 1..=6 {
                assert!((fq.value(t, &sp.full_at(i)).unwrap() - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_features_recover_gaussian_value() {
        let g = GaussianProcess::new(NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap(), GaussianMixture::standard(1).unwrap());
        let r = RewardModel::Linear { coef: vec![0.5], offset: 0.0 };
        // exp(v/alpha) is log-linear in x; quadratic features capture it near the bulk.
        let phi = |_t: usize, x: &ContinuousState| vec![1.0, x[0], x[0] * x[0]];
        let opts = FitOptions { alpha: 1.0, rollouts: 20_000, iterations: None, seed: 4 };
        let mc = mc_regression(&g, &r, Box::new(PosteriorMeanValue::new(&g, &r)), Features::Custom(&phi), opts).unwrap();
        let exact = GaussianTiltValue::new(&g, vec![0.5], 0.0, 1.0).unwrap();
        for x in [-0.5, 0.0, 0.5] {
            let (a, b) = (mc.value(10, &vec![x]).unwrap(), exact.value(10, &vec![x]).unwrap());
            assert!((a - b).abs() < 0.05, "x={x} fit={a} exact={b}");
        }
        assert!(mc.gradient(10, &vec![0.0]).unwrap()[0].is_finite());
    }
}
