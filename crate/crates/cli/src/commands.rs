//! Subcommand bodies.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use softguide::distill::{
    distill_kl, inverse_kl_optimize, kernel_induced_law, make_rollin, max_row_tv, pcl_optimize, teacher_transitions,
    OptimOptions, RollinKind, RollinSpec, SvddTeacher, TabularPolicy,
};
use softguide::oracle_metrics::tv_distance;
use softguide::processes::Kernel;
use softguide::rng::derive_seed;
use softguide::samplers::svdd_chain;
use softguide::search_refine::{refine, Acceptance, RefineConfig};
use softguide::{DiscreteSequence, Reward};

use crate::config::{AcceptanceKind, Algorithm, LoadedConfig, Objective, Rollin};
use crate::experiment::{self, guidance_config, masked_oracle, masked_values, value_alpha, Model};
use crate::output::{self, csv_writer, write_timing};

/// Overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

const DEFAULT_OUT: &str = "out";
/// Seed tags for the stages of distillation.
const ROLLIN_TAG: u64 = 0xD15;
const LABEL_TAG: u64 = 0x1AB;

impl Globals {
    pub fn seed(&self, cfg: &LoadedConfig) -> u64 {
        self.seed.or(cfg.config.seed).unwrap_or(0)
    }

    pub fn out_dir(&self, cfg: &LoadedConfig) -> PathBuf {
        self.out_dir.clone().or_else(|| cfg.config.output.dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

pub fn run(cfg: &LoadedConfig, g: &Globals) -> Result<PathBuf> {
    let seed = g.seed(cfg);
    let start = Instant::now();
    let out = experiment::run(&cfg.config, seed)?;
    let dir = g.out_dir(cfg);
    output::write_run(&dir, &out, start.elapsed())?;
    println!("{}", output::describe(&out.summary));
    Ok(dir)
}

pub fn sweep(cfg: &LoadedConfig, g: &Globals) -> Result<PathBuf> {
    let Some(sw) = &cfg.config.sweep else {
        return Err(cfg.error("sweep", "parameter", "the sweep command needs a [sweep] table").into());
    };
    let seed = g.seed(cfg);
    let points: Vec<_> = sw
        .values
        .par_iter()
        .map(|&x| -> Result<_> {
            let mut c = cfg.config.clone();
            c.sampler.set(&sw.parameter, x).map_err(|m| cfg.error("sweep", "values", m))?;
            let start = Instant::now();
            let out = experiment::run(&c, seed).with_context(|| format!("sweep point {} = {x}", sw.parameter))?;
            Ok((x, out.summary, start.elapsed()))
        })
        .collect::<Result<_>>()?;
    let dir = g.out_dir(cfg);
    let rows: Vec<_> = points.iter().map(|(x, s, _)| (*x, s.clone())).collect();
    output::write_sweep(&dir, &sw.parameter, &rows)?;
    let timing: Vec<_> = points.iter().map(|(x, _, d)| (format!("{}={x}", sw.parameter), *d)).collect();
    write_timing(&dir, "sweep_timing.csv", &timing)?;
    for (x, s) in &rows {
        println!("{} = {x}: {}", sw.parameter, output::describe(s));
    }
    Ok(dir)
}

/// Write the pre-trained and tilted laws of small models.
pub fn oracle(cfg: &LoadedConfig, g: &Globals) -> Result<PathBuf> {
    let c = &cfg.config;
    let alpha = c.sampler.alpha;
    if !(alpha > 0.0) {
        return Err(cfg.error("sampler", "alpha", "the oracle needs a positive temperature").into());
    }
    let model = Model::build(&c.model)?;
    let reward = experiment::build_reward(&c.reward, &model)?;
    let dir = g.out_dir(cfg);
    let mut w = csv_writer(&dir, "oracle.csv")?;
    w.write_record(["state", "reward", "pretrained", "target"])?;
    let log_z = match &model {
        Model::Masked(m) => {
            let pre = masked_oracle(m, &reward, f64::INFINITY)?;
            let target = masked_oracle(m, &reward, alpha)?;
            for (i, y) in m.space().clean_states().enumerate() {
                w.write_record([y.to_string(), reward.reward(&y).to_string(), pre[i].to_string(), target[i].to_string()])?;
            }
            let log_e = pre.iter().zip(m.space().clean_states()).map(|(p, y)| p * (reward.reward(&y) / alpha).exp()).sum::<f64>();
            log_e.ln()
        }
        Model::Gaussian(gp) => {
            let pre = experiment::gaussian_oracle(gp.data(), &reward, f64::INFINITY)?;
            let target = experiment::gaussian_oracle(gp.data(), &reward, alpha)?;
            for (i, &x) in target.support.iter().enumerate() {
                w.write_record([x.to_string(), reward.reward(&vec![x]).to_string(), pre.probs[i].to_string(), target.probs[i].to_string()])?;
            }
            target.log_z
        }
        Model::So3(_) => bail!("no enumerable oracle exists for rotation models"),
    };
    w.flush()?;
    println!("log E_pre[exp(r/alpha)] = {log_z}");
    Ok(dir)
}

pub fn refine_cmd(cfg: &LoadedConfig, g: &Globals) -> Result<PathBuf> {
    let c = &cfg.config;
    let Some(r) = &c.refine else {
        return Err(cfg.error("refine", "seed_state", "the refine command needs a [refine] table").into());
    };
    let model = Model::build(&c.model)?;
    let reward = experiment::build_reward(&c.reward, &model)?;
    let Model::Masked(m) = &model else { bail!("refinement runs on masked models") };
    let seed = g.seed(cfg);
    let start_state: DiscreteSequence =
        r.seed_state.parse().map_err(|e| cfg.error("refine", "seed_state", format!("{e}")))?;
    m.space().check(&start_state).map_err(|e| cfg.error("refine", "seed_state", e.to_string()))?;
    let s = &c.sampler;
    let selects = matches!(s.algorithm, Algorithm::Svdd | Algorithm::Beam);
    let values = masked_values(m, &reward, &c.value, value_alpha(&c.value, s), seed)?;
    let mut inner = guidance_config(s, seed);
    if s.algorithm == Algorithm::Beam {
        inner.alpha = 0.0;
    }
    if !selects {
        inner.candidates = 1;
    }
    let denoise = |t: usize, x: DiscreteSequence, sub: u64| {
        let g = softguide::samplers::GuidanceConfig { seed: sub, ..inner };
        svdd_chain(m, &values, None, &g, 0, t, x, false).map(|r| r.0)
    };
    let rc = RefineConfig {
        iterations: r.iterations,
        noise_level: r.noise_level,
        max_distance: r.max_distance,
        acceptance: match r.acceptance {
            AcceptanceKind::Greedy => Acceptance::Greedy,
            AcceptanceKind::Tempered => Acceptance::Tempered { temperature: r.temperature.unwrap_or(1.0) },
        },
        seed,
    };
    let (best, steps) = refine(m, &reward, &start_state, denoise, |a, b| a.hamming(b) as f64, &rc)?;
    let dir = g.out_dir(cfg);
    let mut w = csv_writer(&dir, "refine.csv")?;
    w.write_record(["iteration", "state", "reward", "distance", "accepted", "current_reward"])?;
    let r0 = reward.reward(&start_state).to_string();
    w.write_record(["0".to_string(), start_state.to_string(), r0.clone(), "0".into(), "1".into(), r0])?;
    for st in &steps {
        w.write_record([
            st.iteration.to_string(),
            st.proposal.to_string(),
            st.proposal_reward.to_string(),
            st.distance.to_string(),
            u8::from(st.accepted).to_string(),
            st.current_reward.to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "refined {} -> {} (reward {} -> {}), {} of {} accepted",
        start_state,
        best,
        reward.reward(&start_state),
        reward.reward(&best),
        steps.iter().filter(|s| s.accepted).count(),
        steps.len()
    );
    Ok(dir)
}

pub fn distill(cfg: &LoadedConfig, g: &Globals) -> Result<PathBuf> {
    let c = &cfg.config;
    let Some(d) = &c.distill else {
        return Err(cfg.error("distill", "objective", "the distill command needs a [distill] table").into());
    };
    let model = Model::build(&c.model)?;
    let reward = experiment::build_reward(&c.reward, &model)?;
    let Model::Masked(m) = &model else { bail!("distillation runs on masked models") };
    let seed = g.seed(cfg);
    let s = &c.sampler;
    let alpha = value_alpha(&c.value, s);
    if !(alpha > 0.0) {
        return Err(cfg.error("value", "alpha", "distillation needs a positive temperature").into());
    }
    let values = masked_values(m, &reward, &c.value, alpha, seed)?;
    let soft = TabularPolicy::soft_optimal(m, &values, alpha)?;
    let selector = SvddTeacher { process: m, values: &values, alpha: s.alpha, candidates: s.candidates };
    let teacher: &dyn Kernel<DiscreteSequence> =
        if matches!(s.algorithm, Algorithm::Svdd | Algorithm::Beam) { &selector } else { &soft };

    let dataset = d
        .dataset
        .iter()
        .map(|y| y.parse::<DiscreteSequence>().map_err(|e| cfg.error("distill", "dataset", e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = RollinSpec {
        kind: match d.rollin {
            Rollin::Teacher => RollinKind::Teacher,
            Rollin::Student => RollinKind::Student,
            Rollin::ForwardRecycle => RollinKind::ForwardRecycle(dataset),
        },
        mix: d.mix,
    };
    let mut student = TabularPolicy::pretrained(m);
    let states = make_rollin(&spec, teacher, &student, d.trajectories, derive_seed(seed, 0, ROLLIN_TAG))?;
    let cells: Vec<_> = states.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let opts = OptimOptions { lr: d.lr, max_steps: d.max_steps, tol: d.tol };
    let (transitions, steps, grad_norm) = match d.objective {
        Objective::ForwardKl => {
            let batch = teacher_transitions(teacher, &states, derive_seed(seed, 0, LABEL_TAG))?;
            distill_kl(&mut student, &batch)?;
            (batch.len(), 0, None)
        }
        Objective::Pcl => {
            let batch = teacher_transitions(teacher, &states, derive_seed(seed, 0, LABEL_TAG))?;
            let rep = pcl_optimize(&mut student, &values, alpha, &batch, opts)?;
            (batch.len(), rep.steps, Some(rep.grad_norm))
        }
        Objective::InverseKl => {
            let rep = inverse_kl_optimize(&mut student, &values, alpha, &cells, opts)?;
            (0, rep.steps, Some(rep.grad_norm))
        }
    };
    let target = masked_oracle(m, &reward, alpha)?;
    let tv = tv_distance(&kernel_induced_law(m, &student)?, &target)?;
    let row_tv = max_row_tv(&student, &soft, &cells)?;

    let dir = g.out_dir(cfg);
    let mut table = output::create(&dir, "student.csv")?;
    student.write_table(&mut table)?;
    std::io::Write::flush(&mut table)?;
    let mut w = csv_writer(&dir, "distill.csv")?;
    w.write_record([
        "objective",
        "rollin",
        "trajectories",
        "transitions",
        "visited_cells",
        "steps",
        "grad_norm",
        "tv_to_oracle",
        "max_row_tv_to_soft_optimal",
    ])?;
    w.write_record([
        d.objective.name().to_string(),
        d.rollin.name().to_string(),
        d.trajectories.to_string(),
        transitions.to_string(),
        cells.len().to_string(),
        steps.to_string(),
        grad_norm.map(|v| v.to_string()).unwrap_or_default(),
        tv.to_string(),
        row_tv.to_string(),
    ])?;
    w.flush()?;
    println!(
        "distilled a {}-row student over {} visited cells; TV to oracle {tv:.4}, max row TV to the soft-optimal policy {row_tv:.4}",
        student.rows(),
        cells.len()
    );
    Ok(dir)
}

/// Parse and validate only.
pub fn check(path: &Path) -> Result<()> {
    let cfg = LoadedConfig::load(path)?;
    println!("{}: ok ({} on {})", path.display(), cfg.config.sampler.algorithm.name(), cfg.config.model.name());
    Ok(())
}
