//! Experiment configuration: TOML grammar, parsing and cross-field validation.
//!
//! Every diagnostic carries the file and, where it can be found, the line of
//! the offending key.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

/// A configuration problem anchored to a file position.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        if !self.field.is_empty() {
            write!(f, ": {}", self.field)?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub reward: RewardConfig,
    #[serde(default)]
    pub value: ValueConfig,
    pub sampler: SamplerConfig,
    pub sweep: Option<SweepConfig>,
    pub refine: Option<RefineBlock>,
    pub distill: Option<DistillBlock>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Masked diffusion over `vocab^length` sequences with a tabular data law
    /// listed in lexicographic order (`AA, AB, BA, BB` for two tokens).
    Masked { schedule: String, steps: usize, vocab: usize, length: usize, data: Vec<f64> },
    /// Gaussian diffusion with diagonal Gaussian-mixture data.
    Gaussian { schedule: String, steps: usize, components: Vec<ComponentConfig> },
    /// Rotations concentrating at `exp(hat(mode))` with strength `kappa`.
    So3 {
        steps: usize,
        kappa: f64,
        #[serde(default)]
        mode: [f64; 3],
    },
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Masked { .. } => "masked",
            Self::Gaussian { .. } => "gaussian",
            Self::So3 { .. } => "so3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardConfig {
    /// One reward per clean sequence, lexicographic order.
    Table { values: Vec<f64> },
    Linear {
        coef: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `-scale * |x - center|^2`.
    Quadratic { center: Vec<f64>, scale: f64 },
    /// `tr(R_0^T R)` with `R_0 = exp(hat(target))`.
    Frobenius { target: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Exact,
    PosteriorMean,
    ClosedForm,
    McRegression,
    SoftQIteration,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueConfig {
    #[serde(default = "default_value_kind")]
    pub kind: ValueKind,
    /// Temperature the values are built for; defaults to `sampler.alpha`.
    pub alpha: Option<f64>,
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    pub iterations: Option<usize>,
}

fn default_value_kind() -> ValueKind {
    ValueKind::PosteriorMean
}

fn default_rollouts() -> usize {
    10_000
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self { kind: default_value_kind(), alpha: None, rollouts: default_rollouts(), iterations: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pretrained,
    BestOfN,
    Smc,
    Svdd,
    NestedSmc,
    Beam,
    Mcts,
    DiscreteExact,
    DiscreteTaylor,
    Classifier,
    So3Guidance,
    WalkJump,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrained => "pretrained",
            Self::BestOfN => "best_of_n",
            Self::Smc => "smc",
            Self::Svdd => "svdd",
            Self::NestedSmc => "nested_smc",
            Self::Beam => "beam",
            Self::Mcts => "mcts",
            Self::DiscreteExact => "discrete_exact",
            Self::DiscreteTaylor => "discrete_taylor",
            Self::Classifier => "classifier",
            Self::So3Guidance => "so3_guidance",
            Self::WalkJump => "walk_jump",
        }
    }

    /// Whether the algorithm reads a value model.
    pub fn uses_values(self) -> bool {
        !matches!(self, Self::Pretrained | Self::BestOfN | Self::WalkJump)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingKind {
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub algorithm: Algorithm,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "half")]
    pub ess_threshold: f64,
    #[serde(default = "default_resampling")]
    pub resampling: ResamplingKind,
    /// Tree width; defaults to `candidates`.
    pub width: Option<usize>,
    #[serde(default = "default_simulations")]
    pub simulations: usize,
    #[serde(default = "default_depth")]
    pub depth_limit: usize,
    #[serde(default = "one")]
    pub exploration_c: f64,
    #[serde(default)]
    pub lookahead_k: usize,
    #[serde(default = "half")]
    pub sigma: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn default_particles() -> usize {
    1000
}
fn default_candidates() -> usize {
    8
}
fn default_resampling() -> ResamplingKind {
    ResamplingKind::Multinomial
}
fn default_simulations() -> usize {
    32
}
fn default_depth() -> usize {
    2
}
fn default_step() -> f64 {
    0.05
}
fn default_burn_in() -> usize {
    1000
}
fn default_thin() -> usize {
    10
}

/// Sampler fields a sweep may vary.
pub const SWEEPABLE: &[&str] = &[
    "alpha",
    "particles",
    "candidates",
    "ess_threshold",
    "width",
    "simulations",
    "depth_limit",
    "exploration_c",
    "lookahead_k",
    "sigma",
    "step",
];

impl SamplerConfig {
    /// Set a sweepable field from a grid value.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), String> {
        let int = || {
            if value >= 0.0 && value.fract() == 0.0 && value <= usize::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(format!("`{name}` needs a non-negative integer, got {value}"))
            }
        };
        match name {
            "alpha" => self.alpha = value,
            "particles" => self.particles = int()?,
            "candidates" => self.candidates = int()?,
            "ess_threshold" => self.ess_threshold = value,
            "width" => self.width = Some(int()?),
            "simulations" => self.simulations = int()?,
            "depth_limit" => self.depth_limit = int()?,
            "exploration_c" => self.exploration_c = value,
            "lookahead_k" => self.lookahead_k = int()?,
            "sigma" => self.sigma = value,
            "step" => self.step = value,
            other => return Err(format!("unknown sweep parameter `{other}`; expected one of {}", SWEEPABLE.join(", "))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceKind {
    Greedy,
    Tempered,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineBlock {
    pub seed_state: String,
    pub noise_level: usize,
    pub iterations: usize,
    pub max_distance: Option<f64>,
    #[serde(default = "default_acceptance")]
    pub acceptance: AcceptanceKind,
    pub temperature: Option<f64>,
}

fn default_acceptance() -> AcceptanceKind {
    AcceptanceKind::Greedy
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ForwardKl,
    InverseKl,
    Pcl,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Self::ForwardKl => "forward_kl",
            Self::InverseKl => "inverse_kl",
            Self::Pcl => "pcl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rollin {
    Teacher,
    Student,
    ForwardRecycle,
}

impl Rollin {
    pub fn name(self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
            Self::ForwardRecycle => "forward_recycle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillBlock {
    pub objective: Objective,
    #[serde(default = "default_rollin")]
    pub rollin: Rollin,
    #[serde(default = "one")]
    pub mix: f64,
    #[serde(default = "default_rollouts")]
    pub trajectories: usize,
    #[serde(default)]
    pub dataset: Vec<String>,
    #[serde(default = "one")]
    pub lr: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_rollin() -> Rollin {
    Rollin::Teacher
}
fn default_max_steps() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// A parsed configuration together with its source, for anchoring diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub source: String,
    pub config: ExperimentConfig,
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Line of `key` inside table `[section]`, or of the header if the key is absent.
pub fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
            current = name.trim().to_string();
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

impl LoadedConfig {
    pub fn parse(path: &Path, source: String) -> Result<Self, ConfigError> {
        let config = toml::from_str::<ExperimentConfig>(&source).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of(&source, s.start)),
            field: String::new(),
            message: e.message().trim().to_string(),
        })?;
        let loaded = Self { path: path.to_path_buf(), source, config };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            field: String::new(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(path, source)
    }

    /// An error at `section.key`, anchored to the key's line.
    pub fn error(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.clone(),
            line: locate(&self.source, section, key),
            field: format!("{section}.{key}"),
            message: message.into(),
        }
    }

    /// Cross-field rules that the grammar alone cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        let s = &c.sampler;
        let alg = s.algorithm;
        let model = c.model.name();

        match &c.model {
            ModelConfig::Masked { schedule, steps, .. } | ModelConfig::Gaussian { schedule, steps, .. } => {
                if schedule.parse::<softguide::ScheduleKind>().is_err() {
                    return Err(self.error("model", "schedule", "expected `linear` or `cosine`"));
                }
                if *steps == 0 {
                    return Err(self.error("model", "steps", "must be at least 1"));
                }
            }
            ModelConfig::So3 { steps, kappa, .. } => {
                if *steps == 0 {
                    return Err(self.error("model", "steps", "must be at least 1"));
                }
                if !(*kappa >= 0.0) {
                    return Err(self.error("model", "kappa", "must be non-negative"));
                }
            }
        }

        let reward_ok = matches!(
            (&c.model, &c.reward),
            (ModelConfig::Masked { .. }, RewardConfig::Table { .. })
                | (ModelConfig::Gaussian { .. }, RewardConfig::Linear { .. } | RewardConfig::Quadratic { .. })
                | (ModelConfig::So3 { .. }, RewardConfig::Frobenius { .. })
        );
        if !reward_ok {
            return Err(self.error("reward", "kind", format!("reward kind does not act on the {model} model")));
        }

        if !(s.alpha >= 0.0 && s.alpha.is_finite()) {
            return Err(self.error("sampler", "alpha", "must be finite and non-negative"));
        }
        let needs_positive_alpha = matches!(
            alg,
            Algorithm::Smc
                | Algorithm::NestedSmc
                | Algorithm::DiscreteExact
                | Algorithm::DiscreteTaylor
                | Algorithm::Classifier
                | Algorithm::So3Guidance
                | Algorithm::WalkJump
        );
        if needs_positive_alpha && s.alpha == 0.0 {
            return Err(self.error("sampler", "alpha", format!("must be positive for {}", alg.name())));
        }
        if s.particles == 0 {
            return Err(self.error("sampler", "particles", "must be at least 1"));
        }
        if s.candidates == 0 {
            return Err(self.error("sampler", "candidates", "must be at least 1"));
        }
        if !(s.ess_threshold > 0.0 && s.ess_threshold <= 1.0) {
            return Err(self.error("sampler", "ess_threshold", "must lie in (0, 1]"));
        }
        if alg == Algorithm::Mcts {
            if s.width == Some(0) {
                return Err(self.error("sampler", "width", "must be at least 1"));
            }
            if s.simulations == 0 {
                return Err(self.error("sampler", "simulations", "must be at least 1"));
            }
            if s.depth_limit == 0 {
                return Err(self.error("sampler", "depth_limit", "must be at least 1"));
            }
            if !(s.exploration_c >= 0.0) {
                return Err(self.error("sampler", "exploration_c", "must be non-negative"));
            }
        }
        if alg == Algorithm::WalkJump && !(s.sigma > 0.0 && s.step > 0.0 && s.thin > 0) {
            return Err(self.error("sampler", "sigma", "walk-jump needs positive sigma, step and thin"));
        }

        let alg_ok = match alg {
            Algorithm::DiscreteExact | Algorithm::DiscreteTaylor => model == "masked",
            Algorithm::Classifier | Algorithm::WalkJump => model == "gaussian",
            Algorithm::So3Guidance => model == "so3",
            _ => true,
        };
        if !alg_ok {
            return Err(self.error("sampler", "algorithm", format!("{} does not run on the {model} model", alg.name())));
        }
        if alg == Algorithm::WalkJump && !matches!(c.reward, RewardConfig::Linear { .. } | RewardConfig::Quadratic { .. }) {
            return Err(self.error("reward", "kind", "walk-jump needs a differentiable reward"));
        }

        let v = &c.value;
        if alg.uses_values() {
            let value_ok = match v.kind {
                ValueKind::Exact | ValueKind::McRegression | ValueKind::SoftQIteration => model == "masked",
                ValueKind::ClosedForm => model == "gaussian" && matches!(c.reward, RewardConfig::Linear { .. }),
                ValueKind::PosteriorMean => true,
            };
            if !value_ok {
                return Err(self.error("value", "kind", format!("this estimator is not available for the {model} model and reward")));
            }
            if let Some(a) = v.alpha {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(self.error("value", "alpha", "must be positive and finite"));
                }
            } else if v.kind != ValueKind::PosteriorMean && s.alpha == 0.0 {
                return Err(self.error("value", "alpha", "set it explicitly when sampler.alpha is 0"));
            }
            if matches!(v.kind, ValueKind::McRegression | ValueKind::SoftQIteration) && v.rollouts == 0 {
                return Err(self.error("value", "rollouts", "must be at least 1"));
            }
        }

        if let Some(sw) = &c.sweep {
            if sw.values.is_empty() {
                return Err(self.error("sweep", "values", "grid must not be empty"));
            }
            let mut probe = s.clone();
            for &x in &sw.values {
                probe.set(&sw.parameter, x).map_err(|m| {
                    let key = if SWEEPABLE.contains(&sw.parameter.as_str()) { "values" } else { "parameter" };
                    self.error("sweep", key, m)
                })?;
            }
        }

        if let Some(r) = &c.refine {
            if model != "masked" {
                return Err(self.error("refine", "seed_state", "refinement runs on masked models"));
            }
            if r.acceptance == AcceptanceKind::Tempered && !r.temperature.is_some_and(|t| t > 0.0) {
                return Err(self.error("refine", "temperature", "tempered acceptance needs a positive temperature"));
            }
        }

        if let Some(d) = &c.distill {
            if model != "masked" {
                return Err(self.error("distill", "objective", "distillation runs on masked models"));
            }
            if !(0.0..=1.0).contains(&d.mix) {
                return Err(self.error("distill", "mix", "must lie in [0, 1]"));
            }
            if d.rollin == Rollin::ForwardRecycle && d.dataset.is_empty() {
                return Err(self.error("distill", "dataset", "forward recycling needs a non-empty dataset"));
            }
            if d.trajectories == 0 {
                return Err(self.error("distill", "trajectories", "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "seed = 3\n\n[model]\nkind = \"masked\"\nschedule = \"linear\"\nsteps = 8\nvocab = 2\nlength = 2\ndata = [0.4, 0.1, 0.15, 0.35]\n\n[reward]\nkind = \"table\"\nvalues = [0.0, 0.5, 0.25, 1.0]\n\n[value]\nkind = \"exact\"\n\n[sampler]\nalgorithm = \"svdd\"\nalpha = 1.0\n";

    fn parse(src: &str) -> Result<LoadedConfig, ConfigError> {
        LoadedConfig::parse(Path::new("exp.toml"), src.to_string())
    }

    #[test]
    fn base_config_parses_with_defaults() {
        let c = parse(BASE).unwrap().config;
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.sampler.particles, 1000);
        assert_eq!(c.sampler.candidates, 8);
        assert_eq!(c.value.kind, ValueKind::Exact);
    }

    #[test]
    fn smc_with_zero_alpha_names_the_field_and_line() {
        let src = BASE.replace("algorithm = \"svdd\"\nalpha = 1.0", "algorithm = \"smc\"\nalpha = 0.0");
        let e = parse(&src).unwrap_err();
        assert_eq!(e.field, "sampler.alpha");
        assert_eq!(e.line, Some(20));
        assert!(e.to_string().starts_with("exp.toml:20: sampler.alpha:"));
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let src = BASE.replace("steps = 8", "steps = = 8");
        let e = parse(&src).unwrap_err();
        assert_eq!(e.line, Some(6));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = BASE.replace("alpha = 1.0", "alpha = 1.0\nparticle = 5");
        let e = parse(&src).unwrap_err();
        assert_eq!(e.line, Some(21));
        assert!(e.message.contains("particle"));
    }

    #[test]
    fn unknown_sweep_parameter_is_rejected() {
        let src = format!("{BASE}\n[sweep]\nparameter = \"temperature\"\nvalues = [1.0]\n");
        let e = parse(&src).unwrap_err();
        assert_eq!(e.field, "sweep.parameter");
    }

    #[test]
    fn integer_fields_reject_fractional_grid_points() {
        let src = format!("{BASE}\n[sweep]\nparameter = \"candidates\"\nvalues = [1.0, 2.5]\n");
        assert_eq!(parse(&src).unwrap_err().field, "sweep.values");
    }

    #[test]
    fn mismatched_reward_is_rejected() {
        let src = BASE.replace("kind = \"table\"\nvalues = [0.0, 0.5, 0.25, 1.0]", "kind = \"linear\"\ncoef = [1.0]");
        assert_eq!(parse(&src).unwrap_err().field, "reward.kind");
    }
}
