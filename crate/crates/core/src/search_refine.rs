//! Tree search over denoising steps and iterative refinement of finished samples.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::processes::{Kernel, Process};
use crate::rewards::Reward;
use crate::rng::{derive_seed, stream, Purpose, StreamRng};
use crate::samplers::{initial_state, SamplerReport};
use crate::values::ValueModel;

/// Value after rolling `k` pre-trained steps from the leaf `(t, x)`; `k = 0` is
/// `v_t(x)`. Pass a posterior-mean value model for the usual lookahead estimate.
pub fn leaf_rollout_value<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    t: usize,
    x: &P::State,
    k: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    if k > t {
        return Err(invalid(format!("lookahead {k} exceeds the leaf level {t}")));
    }
    rollout(process, values, t, x, k, rng)
}

fn rollout<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    t: usize,
    x: &P::State,
    k: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut y = x.clone();
    let mut s = t;
    for _ in 0..k.min(t) {
        y = process.sample_step(s, &y, rng)?;
        s -= 1;
    }
    values.value(s, &y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Maximum children per node.
    pub width: usize,
    /// Simulations per denoising step.
    pub simulations: usize,
    /// Levels below the root that may be expanded.
    pub depth_limit: usize,
    /// UCT exploration constant; `0` is greedy on mean value.
    pub exploration_c: f64,
    /// Pre-trained steps rolled out from each new leaf before reading its value,
    /// clipped to the leaf level.
    pub lookahead_k: usize,
    pub particles: usize,
    pub seed: u64,
}

struct Node<S> {
    state: S,
    t: usize,
    children: Vec<usize>,
    visits: f64,
    total: f64,
}

impl<S> Node<S> {
    fn mean(&self) -> f64 {
        if self.visits > 0.0 {
            self.total / self.visits
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Child of `root` to commit to: most visits, then best mean, then lowest index.
fn commit<S>(tree: &[Node<S>], root: usize) -> usize {
    let kids = &tree[root].children;
    let mut best = kids[0];
    for &c in &kids[1..] {
        let (a, b) = (&tree[c], &tree[best]);
        if a.visits > b.visits || (a.visits == b.visits && a.mean() > b.mean()) {
            best = c;
        }
    }
    best
}

/// Monte Carlo tree search with UCT selection and mean backups, run afresh at
/// every denoising step. Root children are drawn from the same stream as the
/// candidates of [`crate::samplers::beam_search`].
pub fn mcts<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &SearchConfig,
) -> Result<SamplerReport<P::State>> {
    if cfg.width == 0 || cfg.simulations == 0 || cfg.depth_limit == 0 || cfg.particles == 0 {
        return Err(invalid("MCTS needs positive width, simulations, depth and particles"));
    }
    if !(cfg.exploration_c >= 0.0) {
        return Err(invalid("exploration constant must be non-negative"));
    }
    let samples = (0..cfg.particles)
        .into_par_iter()
        .map(|i| {
            let mut x = initial_state(process, cfg.seed, i);
            for t in (1..=process.steps()).rev() {
                x = mcts_step(process, values, proposal, cfg, i, t, x)?.0;
            }
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SamplerReport::plain(samples))
}

fn mcts_step<P: Process, V: ValueModel<P::State> + ?Sized>(
    process: &P,
    values: &V,
    proposal: Option<&dyn Kernel<P::State>>,
    cfg: &SearchConfig,
    lane: usize,
    t: usize,
    x: P::State,
) -> Result<(P::State, Vec<f64>)> {
    let draw = |t: usize, x: &P::State, rng: &mut StreamRng| match proposal {
        None => process.sample_step(t, x, rng),
        Some(q) => q.sample(t, x, rng),
    };
    let mut root_rng = stream(cfg.seed, lane as u64, t as u64, Purpose::Propose);
    let mut deep_rng = stream(cfg.seed, lane as u64, t as u64, Purpose::Search);
    let mut tree = vec![Node { state: x, t, children: Vec::new(), visits: 0.0, total: 0.0 }];
    for _ in 0..cfg.simulations {
        let mut path = vec![0usize];
        let mut node = 0usize;
        let leaf_value = loop {
            let depth = path.len() - 1;
            let (nt, full) = (tree[node].t, tree[node].children.len() >= cfg.width);
            if nt == 0 || depth >= cfg.depth_limit {
                break values.value(nt, &tree[node].state)?;
            }
            if !full {
                let rng = if node == 0 { &mut root_rng } else { &mut deep_rng };
                let child = draw(nt, &tree[node].state, rng)?;
                let v = rollout(process, values, nt - 1, &child, cfg.lookahead_k, &mut deep_rng)?;
                tree.push(Node { state: child, t: nt - 1, children: Vec::new(), visits: 0.0, total: 0.0 });
                let id = tree.len() - 1;
                tree[node].children.push(id);
                path.push(id);
                break v;
            }
            let ln_n = tree[node].visits.max(1.0).ln();
            let mut best = tree[node].children[0];
            let mut best_score = f64::NEG_INFINITY;
            for &c in &tree[node].children {
                let ch = &tree[c];
                let score = ch.mean() + cfg.exploration_c * (ln_n / ch.visits.max(1.0)).sqrt();
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            node = best;
            path.push(node);
        };
        for &n in &path {
            tree[n].visits += 1.0;
            tree[n].total += leaf_value;
        }
    }
    let visits = tree[0].children.iter().map(|&c| tree[c].visits).collect();
    let pick = commit(&tree, 0);
    Ok((tree.swap_remove(pick).state, visits))
}

/// Rule for keeping a refined proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Acceptance {
    /// Keep the proposal when its reward is at least the current one.
    Greedy,
    /// Metropolis rule on reward differences at the given temperature.
    Tempered { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Noise level to re-noise to; `0` keeps the sample, `T + 1` regenerates it.
    pub noise_level: usize,
    /// Largest allowed distance to the seed sample.
    pub max_distance: Option<f64>,
    pub acceptance: Acceptance,
    pub seed: u64,
}

/// One refinement iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineStep<S> {
    pub iteration: usize,
    pub proposal: S,
    pub proposal_reward: f64,
    pub distance: f64,
    pub accepted: bool,
    /// Reward of the kept sample after this iteration.
    pub current_reward: f64,
}

/// Re-noise, re-denoise and accept or reject, starting from `seed_sample`.
///
/// `denoise(t, x_t, seed)` runs any sampler from level `t` to `0`. Proposals that
/// violate the distance constraint are redrawn; `10 * iterations` consecutive
/// violations raise [`Error::Stall`].
pub fn refine<P, R, D, F>(
    process: &P,
    reward: &R,
    seed_sample: &P::State,
    denoise: D,
    distance: F,
    cfg: &RefineConfig,
) -> Result<(P::State, Vec<RefineStep<P::State>>)>
where
    P: Process,
    R: Reward<P::State>,
    D: Fn(usize, P::State, u64) -> Result<P::State>,
    F: Fn(&P::State, &P::State) -> f64,
{
    let steps = process.steps();
    if cfg.noise_level > steps + 1 {
        return Err(invalid(format!("noise level {} exceeds T + 1 = {}", cfg.noise_level, steps + 1)));
    }
    if let Acceptance::Tempered { temperature } = cfg.acceptance {
        if !(temperature > 0.0) {
            return Err(invalid("tempered acceptance needs a positive temperature"));
        }
    }
    let mut current = seed_sample.clone();
    let mut current_reward = reward.reward(&current);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut rejected = 0usize;
    let mut attempt = 0u64;
    for it in 0..cfg.iterations {
        let (proposal, d) = loop {
            let sub = derive_seed(cfg.seed, attempt, 0x5EED);
            attempt += 1;
            let mut rng = stream(sub, 0, 0, Purpose::Refine);
            let (t0, xt) = if cfg.noise_level == steps + 1 {
                (steps, initial_state(process, sub, 0))
            } else if cfg.noise_level == 0 {
                (0, current.clone())
            } else {
                (cfg.noise_level, process.forward_sample(&current, cfg.noise_level, &mut rng)?)
            };
            let y = denoise(t0, xt, sub)?;
            let d = distance(&y, seed_sample);
            if cfg.max_distance.map_or(true, |m| d <= m) {
                rejected = 0;
                break (y, d);
            }
            rejected += 1;
            if rejected >= 10 * cfg.iterations.max(1) {
                return Err(Error::Stall { rejected });
            }
        };
        let r = reward.reward(&proposal);
        let accepted = match cfg.acceptance {
            Acceptance::Greedy => r >= current_reward,
            Acceptance::Tempered { temperature } => {
                let u: f64 = rand::Rng::random(&mut stream(cfg.seed, it as u64, 0, Purpose::Select));
                r >= current_reward || u < ((r - current_reward) / temperature).exp()
            }
        };
        if accepted {
            current = proposal.clone();
            current_reward = r;
        }
        trace.push(RefineStep { iteration: it, proposal, proposal_reward: r, distance: d, accepted, current_reward });
    }
    Ok((current, trace))
}
