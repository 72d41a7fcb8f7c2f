//! Builds processes, rewards and value models from a configuration and runs the
//! selected sampler.

use anyhow::{anyhow, bail, Result};
use softguide::geometry_so3::{so3_exp, TangentVector};
use softguide::oracle_metrics::{brute_force_target, empirical_discrete, empirical_grid, grid_target, tv_distance};
use softguide::processes::MixtureComponent;
use softguide::rng::derive_seed;
use softguide::samplers::{
    beam_search, best_of_n, classifier_guidance, discrete_guidance, nested_smc, sample_pretrained, smc_guidance,
    so3_guidance, svdd, walk_jump, DiscreteGuidance, GuidanceConfig, Resampling, SamplerReport, WalkJumpConfig,
};
use softguide::search_refine::{mcts, SearchConfig};
use softguide::values::{
    mc_regression, soft_q_iteration, ContinuousValue, ExactValues, Features, FitOptions, FittedValues,
    GaussianTiltValue, PosteriorMeanValue, Provenance, RotationValue, ValueModel,
};
use softguide::{
    DiscreteSequence, GaussianMixture, GaussianProcess, MaskedProcess, NoiseSchedule, Process, Reward, RewardModel,
    RotationState, ScheduleKind, SeqSpace, So3Process,
};

use crate::config::{
    Algorithm, ExperimentConfig, ModelConfig, RewardConfig, ResamplingKind, SamplerConfig, ValueConfig, ValueKind,
};

/// Seed tag separating value fitting from sampling.
const FIT_TAG: u64 = 0xF17;
/// Seed tag for the independent best-of-N runs.
const BEST_OF_N_TAG: u64 = 0xB0F;

/// Grid used for one-dimensional Gaussian oracles.
pub const GRID_LO: f64 = -10.0;
pub const GRID_HI: f64 = 10.0;
pub const GRID_CELLS: usize = 200;

pub enum Model {
    Masked(MaskedProcess),
    Gaussian(GaussianProcess),
    So3(So3Process),
}

fn rotation(v: &[f64; 3]) -> RotationState {
    so3_exp(&RotationState::identity(), &TangentVector::new(v[0], v[1], v[2]))
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::Masked { schedule, steps, vocab, length, data } => {
                let kind: ScheduleKind = schedule.parse()?;
                let space = SeqSpace::new(*vocab, *length)?;
                Self::Masked(MaskedProcess::new(NoiseSchedule::new(kind, *steps)?, space, data.clone())?)
            }
            ModelConfig::Gaussian { schedule, steps, components } => {
                let kind: ScheduleKind = schedule.parse()?;
                let comps = components
                    .iter()
                    .map(|c| MixtureComponent { weight: c.weight, mean: c.mean.clone(), var: c.var.clone() })
                    .collect();
                Self::Gaussian(GaussianProcess::new(NoiseSchedule::new(kind, *steps)?, GaussianMixture::new(comps)?))
            }
            ModelConfig::So3 { steps, kappa, mode } => Self::So3(So3Process::new(*steps, rotation(mode), *kappa)?),
        })
    }
}

pub fn build_reward(cfg: &RewardConfig, model: &Model) -> Result<RewardModel> {
    Ok(match cfg {
        RewardConfig::Table { values } => {
            let Model::Masked(m) = model else { bail!("table rewards need a masked model") };
            if values.len() != m.space().clean_size() {
                bail!("reward table has {} entries but the model has {} clean sequences", values.len(), m.space().clean_size());
            }
            RewardModel::Table { space: m.space(), values: values.clone() }
        }
        RewardConfig::Linear { coef, offset } => RewardModel::Linear { coef: coef.clone(), offset: *offset },
        RewardConfig::Quadratic { center, scale } => RewardModel::Quadratic { center: center.clone(), scale: *scale },
        RewardConfig::Frobenius { target } => RewardModel::Frobenius { target: rotation(target).0 },
    })
}

/// Temperature the value model is built for.
pub fn value_alpha(value: &ValueConfig, sampler: &SamplerConfig) -> f64 {
    value.alpha.unwrap_or(sampler.alpha)
}

/// Value models available on masked sequences.
pub enum MaskedValues<'a> {
    Exact(ExactValues),
    Posterior(PosteriorMeanValue<'a, MaskedProcess, RewardModel>),
    Fitted(FittedValues<'a, DiscreteSequence>),
}

impl MaskedValues<'_> {
    pub fn fallback_hits(&self) -> Option<u64> {
        match self {
            Self::Fitted(f) => Some(f.fallback_hits()),
            _ => None,
        }
    }
}

impl ValueModel<DiscreteSequence> for MaskedValues<'_> {
    fn value(&self, t: usize, x: &DiscreteSequence) -> softguide::Result<f64> {
        match self {
            Self::Exact(v) => v.value(t, x),
            Self::Posterior(v) => v.value(t, x),
            Self::Fitted(v) => v.value(t, x),
        }
    }

    fn provenance(&self) -> Provenance {
        match self {
            Self::Exact(v) => v.provenance(),
            Self::Posterior(v) => v.provenance(),
            Self::Fitted(v) => v.provenance(),
        }
    }
}

pub fn masked_values<'a>(
    process: &'a MaskedProcess,
    reward: &'a RewardModel,
    value: &ValueConfig,
    alpha: f64,
    seed: u64,
) -> Result<MaskedValues<'a>> {
    let opts = FitOptions { alpha, rollouts: value.rollouts, iterations: value.iterations, seed: derive_seed(seed, 0, FIT_TAG) };
    let fallback = || Box::new(PosteriorMeanValue::new(process, reward)) as Box<dyn ValueModel<DiscreteSequence> + 'a>;
    Ok(match value.kind {
        ValueKind::Exact => MaskedValues::Exact(ExactValues::build(process, reward, alpha)?),
        ValueKind::PosteriorMean => MaskedValues::Posterior(PosteriorMeanValue::new(process, reward)),
        ValueKind::McRegression => {
            MaskedValues::Fitted(mc_regression(process, reward, fallback(), Features::Tabular, opts)?)
        }
        ValueKind::SoftQIteration => {
            MaskedValues::Fitted(soft_q_iteration(process, reward, fallback(), Features::Tabular, opts)?)
        }
        ValueKind::ClosedForm => bail!("closed-form values need a Gaussian model"),
    })
}

fn gaussian_values<'a>(
    process: &'a GaussianProcess,
    reward: &'a RewardModel,
    value: &ValueConfig,
    alpha: f64,
) -> Result<Box<dyn ContinuousValue + 'a>> {
    Ok(match (value.kind, reward) {
        (ValueKind::ClosedForm, RewardModel::Linear { coef, offset }) => {
            Box::new(GaussianTiltValue::new(process, coef.clone(), *offset, alpha)?)
        }
        (ValueKind::PosteriorMean, _) => Box::new(PosteriorMeanValue::new(process, reward)),
        _ => bail!("this value estimator is not available for Gaussian models"),
    })
}

fn so3_values<'a>(process: &'a So3Process, reward: &'a RewardModel, value: &ValueConfig) -> Result<Box<dyn RotationValue + 'a>> {
    match value.kind {
        ValueKind::PosteriorMean => Ok(Box::new(PosteriorMeanValue::new(process, reward))),
        _ => bail!("rotation models support posterior-mean values only"),
    }
}

pub fn guidance_config(s: &SamplerConfig, seed: u64) -> GuidanceConfig {
    GuidanceConfig {
        alpha: s.alpha,
        particles: s.particles,
        candidates: s.candidates,
        ess_threshold: s.ess_threshold,
        resampling: match s.resampling {
            ResamplingKind::Multinomial => Resampling::Multinomial,
            ResamplingKind::Systematic => Resampling::Systematic,
        },
        seed,
    }
}

/// Samplers that run on any process.
fn run_generic<P: Process, R: Reward<P::State>, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    reward: &R,
    values: &V,
    s: &SamplerConfig,
    seed: u64,
) -> Result<SamplerReport<P::State>> {
    let g = guidance_config(s, seed);
    Ok(match s.algorithm {
        Algorithm::Pretrained => SamplerReport {
            samples: sample_pretrained(process, s.particles, seed)?,
            ess_trace: Vec::new(),
            resampled_at: Vec::new(),
            log_z: None,
            local_ess: None,
        },
        Algorithm::BestOfN => {
            let samples = (0..s.particles)
                .map(|i| best_of_n(process, reward, s.candidates, derive_seed(seed, i as u64, BEST_OF_N_TAG)).map(|b| b.0))
                .collect::<softguide::Result<_>>()?;
            SamplerReport { samples, ess_trace: Vec::new(), resampled_at: Vec::new(), log_z: None, local_ess: None }
        }
        Algorithm::Smc => smc_guidance(process, values, None, &g)?,
        Algorithm::Svdd => svdd(process, values, None, &g)?,
        Algorithm::NestedSmc => nested_smc(process, values, None, &g)?,
        Algorithm::Beam => beam_search(process, values, None, &g)?,
        Algorithm::Mcts => mcts(
            process,
            values,
            None,
            &SearchConfig {
                width: s.width.unwrap_or(s.candidates),
                simulations: s.simulations,
                depth_limit: s.depth_limit,
                exploration_c: s.exploration_c,
                lookahead_k: s.lookahead_k,
                particles: s.particles,
                seed,
            },
        )?,
        other => bail!("{} does not run on this model", other.name()),
    })
}

/// Scalar results of one run; every field except wall clock is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub model: String,
    pub sampler: String,
    pub value_model: String,
    pub alpha: f64,
    pub particles: usize,
    pub candidates: usize,
    pub seed: u64,
    pub samples: usize,
    pub mean_reward: f64,
    pub reward_se: f64,
    pub max_reward: f64,
    pub tv_to_oracle: Option<f64>,
    pub ess_min: Option<f64>,
    pub ess_mean: Option<f64>,
    pub resamples: usize,
    pub log_z: Option<f64>,
    pub local_ess: Option<f64>,
    pub fallback_hits: Option<u64>,
}

pub const SUMMARY_HEADER: [&str; 18] = [
    "model",
    "sampler",
    "value_model",
    "alpha",
    "particles",
    "candidates",
    "seed",
    "samples",
    "mean_reward",
    "reward_se",
    "max_reward",
    "tv_to_oracle",
    "ess_min",
    "ess_mean",
    "resamples",
    "log_z",
    "local_ess",
    "fallback_hits",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Summary {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.model.clone(),
            self.sampler.clone(),
            self.value_model.clone(),
            self.alpha.to_string(),
            self.particles.to_string(),
            self.candidates.to_string(),
            self.seed.to_string(),
            self.samples.to_string(),
            self.mean_reward.to_string(),
            self.reward_se.to_string(),
            self.max_reward.to_string(),
            opt(self.tv_to_oracle),
            opt(self.ess_min),
            opt(self.ess_mean),
            self.resamples.to_string(),
            opt(self.log_z),
            opt(self.local_ess),
            opt(self.fallback_hits),
        ]
    }
}

/// Everything a run writes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: Summary,
    /// `(t, ess, resampled)` from the initial step `T + 1` down to `1`.
    pub trace: Vec<(usize, f64, bool)>,
    /// `(state, reward)` per final sample.
    pub samples: Vec<(String, f64)>,
}

fn format_vec(x: &[f64]) -> String {
    x.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn format_rotation(r: &RotationState) -> String {
    // Row-major matrix entries.
    let m = &r.0;
    (0..3).flat_map(|i| (0..3).map(move |j| m[(i, j)].to_string())).collect::<Vec<_>>().join(" ")
}

fn finish<S>(
    report: SamplerReport<S>,
    reward: &impl Reward<S>,
    steps: usize,
    format: impl Fn(&S) -> String,
    tv: Option<f64>,
    mut summary: Summary,
) -> Result<RunOutput> {
    if report.samples.is_empty() {
        bail!("sampler returned no samples");
    }
    let rewards: Vec<f64> = report.samples.iter().map(|x| reward.reward(x)).collect();
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = if rewards.len() > 1 { rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    summary.samples = rewards.len();
    summary.mean_reward = mean;
    summary.reward_se = (var / n).sqrt();
    summary.max_reward = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    summary.tv_to_oracle = tv;
    if !report.ess_trace.is_empty() {
        summary.ess_min = Some(report.ess_trace.iter().cloned().fold(f64::INFINITY, f64::min));
        summary.ess_mean = Some(report.ess_trace.iter().sum::<f64>() / report.ess_trace.len() as f64);
    }
    summary.resamples = report.resampled_at.len();
    summary.log_z = report.log_z;
    summary.local_ess = report.local_ess;
    let trace = report
        .ess_trace
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let t = steps + 1 - i;
            (t, e, report.resampled_at.contains(&t))
        })
        .collect();
    let samples = report.samples.iter().map(&format).zip(rewards).collect();
    Ok(RunOutput { summary, trace, samples })
}

/// Run the configured sampler with `seed`.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let model = Model::build(&cfg.model)?;
    let reward = build_reward(&cfg.reward, &model)?;
    let s = &cfg.sampler;
    let uses_values = s.algorithm.uses_values();
    let alpha_v = value_alpha(&cfg.value, s);
    let summary = Summary {
        model: cfg.model.name().to_string(),
        sampler: s.algorithm.name().to_string(),
        value_model: if uses_values { cfg.value.kind_name().to_string() } else { String::new() },
        alpha: s.alpha,
        particles: s.particles,
        candidates: s.candidates,
        seed,
        samples: 0,
        mean_reward: 0.0,
        reward_se: 0.0,
        max_reward: 0.0,
        tv_to_oracle: None,
        ess_min: None,
        ess_mean: None,
        resamples: 0,
        log_z: None,
        local_ess: None,
        fallback_hits: None,
    };
    match &model {
        Model::Masked(m) => {
            let values = if uses_values {
                Some(masked_values(m, &reward, &cfg.value, alpha_v, seed)?)
            } else {
                None
            };
            let v: &dyn ValueModel<DiscreteSequence> = match &values {
                Some(v) => v,
                None => &PosteriorMeanValue::new(m, &reward),
            };
            let report = match s.algorithm {
                Algorithm::DiscreteExact | Algorithm::DiscreteTaylor => {
                    let mode =
                        if s.algorithm == Algorithm::DiscreteExact { DiscreteGuidance::Exact } else { DiscreteGuidance::Taylor };
                    discrete_guidance(m, v, s.alpha, mode, s.particles, seed)?
                }
                _ => run_generic(m, &reward, v, s, seed)?,
            };
            let tv = masked_tv(m, &reward, s, &report.samples)?;
            let mut out = finish(report, &reward, m.steps(), |x| x.to_string(), tv, summary)?;
            out.summary.fallback_hits = values.as_ref().and_then(MaskedValues::fallback_hits);
            Ok(out)
        }
        Model::Gaussian(g) => {
            let values = gaussian_values(g, &reward, &cfg.value, alpha_v)?;
            let report = match s.algorithm {
                Algorithm::Classifier => classifier_guidance(g, &*values, s.alpha, s.particles, seed)?,
                Algorithm::WalkJump => {
                    let wj = WalkJumpConfig {
                        sigma: s.sigma,
                        alpha: s.alpha,
                        step: s.step,
                        burn_in: s.burn_in,
                        samples: s.particles,
                        thin: s.thin,
                        seed,
                    };
                    let rep = walk_jump(g.data(), &reward, &wj)?;
                    SamplerReport { samples: rep.jumps, ess_trace: Vec::new(), resampled_at: Vec::new(), log_z: None, local_ess: None }
                }
                _ => run_generic(g, &reward, &*values, s, seed)?,
            };
            let tv = gaussian_tv(g, &reward, s, &report.samples)?;
            finish(report, &reward, g.steps(), |x| format_vec(x), tv, summary)
        }
        Model::So3(p) => {
            let values = so3_values(p, &reward, &cfg.value)?;
            let report = match s.algorithm {
                Algorithm::So3Guidance => so3_guidance(p, &*values, s.alpha, s.particles, seed)?,
                _ => run_generic(p, &reward, &*values, s, seed)?,
            };
            finish(report, &reward, p.steps(), format_rotation, None, summary)
        }
    }
}

/// Temperature of the law a sampler aims at: the tilted target at
/// `sampler.alpha`, infinity for the pre-trained chain, and none for optimizers.
fn oracle_alpha(s: &SamplerConfig) -> Option<f64> {
    match s.algorithm {
        Algorithm::Pretrained => Some(f64::INFINITY),
        Algorithm::BestOfN | Algorithm::Beam | Algorithm::Mcts => None,
        _ => (s.alpha > 0.0).then_some(s.alpha),
    }
}

fn masked_tv(m: &MaskedProcess, reward: &RewardModel, s: &SamplerConfig, samples: &[DiscreteSequence]) -> Result<Option<f64>> {
    let Some(alpha) = oracle_alpha(s) else { return Ok(None) };
    let target = masked_oracle(m, reward, alpha)?;
    Ok(Some(tv_distance(&empirical_discrete(m.space(), samples)?, &target)?))
}

/// Tilted law of the chain's clean output at `alpha`; infinite `alpha` gives the
/// untilted law.
pub fn masked_oracle(m: &MaskedProcess, reward: &RewardModel, alpha: f64) -> Result<Vec<f64>> {
    let pre = m.induced_law()?;
    if alpha.is_infinite() {
        return Ok(pre);
    }
    Ok(brute_force_target(m.space(), &pre, |x| reward.reward(x), alpha)?.probs)
}

fn gaussian_tv(g: &GaussianProcess, reward: &RewardModel, s: &SamplerConfig, samples: &[Vec<f64>]) -> Result<Option<f64>> {
    let Some(alpha) = oracle_alpha(s).filter(|_| g.dim() == 1) else { return Ok(None) };
    let grid = gaussian_oracle(g.data(), reward, alpha)?;
    let xs: Vec<f64> = samples.iter().map(|x| x[0]).collect();
    Ok(Some(tv_distance(&empirical_grid(&grid, &xs), &grid.probs)?))
}

/// Tilted data law on the fixed grid.
pub fn gaussian_oracle(
    data: &GaussianMixture,
    reward: &RewardModel,
    alpha: f64,
) -> Result<softguide::DistributionTable<f64>> {
    if data.dim() != 1 {
        return Err(anyhow!("grid oracles need a one-dimensional model"));
    }
    let r = |x: f64| if alpha.is_infinite() { 0.0 } else { reward.reward(&vec![x]) };
    Ok(grid_target(data, r, if alpha.is_infinite() { 1.0 } else { alpha }, GRID_LO, GRID_HI, GRID_CELLS)?)
}

impl ValueConfig {
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ValueKind::Exact => "exact",
            ValueKind::PosteriorMean => "posterior_mean",
            ValueKind::ClosedForm => "closed_form",
            ValueKind::McRegression => "mc_regression",
            ValueKind::SoftQIteration => "soft_q_iteration",
        }
    }
}
