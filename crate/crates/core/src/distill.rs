//! Tabular students distilled from guided samplers.
//!
//! A student row lives on the support of the pre-trained kernel at `(t, x)` and
//! stores logits over it. Rows that were never touched fall back to the
//! pre-trained kernel. Three objectives are offered: forward KL to a teacher
//! (closed form per row), path consistency against a value model and inverse KL
//! to the soft-optimal policy.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::oracle_metrics::logsumexp;
use crate::processes::{DiscreteKernel, DiscreteSequence, Kernel, MaskedProcess, Process};
use crate::rng::{stream, Purpose, StreamRng};
use crate::samplers::{categorical, normalize};
use crate::values::ValueModel;

/// Additive smoothing for forward-KL rows.
pub const KL_SMOOTHING: f64 = 1e-9;

/// One transition `x_t -> x_{t-1}` observed at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub state: DiscreteSequence,
    pub next: DiscreteSequence,
}

#[derive(Debug, Clone)]
struct Row {
    next: Vec<DiscreteSequence>,
    log_pre: Vec<f64>,
    logits: Vec<f64>,
}

impl Row {
    fn probs(&self) -> Vec<f64> {
        normalize(&self.logits).expect("student row has finite logits")
    }

    fn index(&self, y: &DiscreteSequence) -> Option<usize> {
        self.next.iter().position(|n| n == y)
    }
}

/// Student kernel `p_{t-1}(. | x_t; theta)` with one categorical row per cell.
#[derive(Debug, Clone)]
pub struct TabularPolicy<'a> {
    process: &'a MaskedProcess,
    rows: BTreeMap<(usize, usize), Row>,
}

impl<'a> TabularPolicy<'a> {
    /// A student equal to the pre-trained kernel everywhere.
    pub fn pretrained(process: &'a MaskedProcess) -> Self {
        Self { process, rows: BTreeMap::new() }
    }

    /// The soft-optimal policy `p_pre exp(v_{t-1}/alpha - v_t/alpha)` on every
    /// reachable cell, renormalized per row.
    pub fn soft_optimal<V: ValueModel<DiscreteSequence> + ?Sized>(
        process: &'a MaskedProcess,
        values: &V,
        alpha: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let mut policy = Self::pretrained(process);
        for (t, x) in reachable_cells(process)? {
            let row = policy.row_mut(t, &x)?;
            let next = row.next.clone();
            for (j, y) in next.iter().enumerate() {
                let v = values.value(t - 1, y)?;
                row.logits[j] = row.log_pre[j] + v / alpha;
            }
        }
        Ok(policy)
    }

    pub fn process(&self) -> &'a MaskedProcess {
        self.process
    }

    /// Number of cells that have their own row.
    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    fn key(&self, t: usize, x: &DiscreteSequence) -> (usize, usize) {
        (t, self.process.space().full_index(x))
    }

    fn row_mut(&mut self, t: usize, x: &DiscreteSequence) -> Result<&mut Row> {
        let key = self.key(t, x);
        if !self.rows.contains_key(&key) {
            let support = self.process.support(t, x)?;
            let (next, log_pre): (Vec<_>, Vec<_>) = support.into_iter().map(|(y, p)| (y, p.ln())).unzip();
            let logits = log_pre.clone();
            self.rows.insert(key, Row { next, log_pre, logits });
        }
        Ok(self.rows.get_mut(&key).expect("row was just inserted"))
    }

    /// Next-state distribution at `(t, x)`.
    pub fn row(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<(DiscreteSequence, f64)>> {
        match self.rows.get(&self.key(t, x)) {
            Some(row) => Ok(row.next.iter().cloned().zip(row.probs()).collect()),
            None => self.process.support(t, x),
        }
    }

    /// Rows as `(t, state, next, probability)` records, ordered by step and state.
    pub fn table(&self) -> Vec<(usize, DiscreteSequence, DiscreteSequence, f64)> {
        let space = self.process.space();
        let mut out = Vec::new();
        for (&(t, idx), row) in &self.rows {
            let x = space.full_at(idx);
            for (y, p) in row.next.iter().zip(row.probs()) {
                out.push((t, x.clone(), y.clone(), p));
            }
        }
        out
    }

    /// Write [`Self::table`] as CSV with header `t,state,next,prob`.
    pub fn write_table<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,state,next,prob")?;
        for (t, x, y, p) in self.table() {
            writeln!(w, "{t},{x},{y},{p:.17e}")?;
        }
        Ok(())
    }
}

impl Kernel<DiscreteSequence> for TabularPolicy<'_> {
    fn sample(&self, t: usize, x: &DiscreteSequence, rng: &mut StreamRng) -> Result<DiscreteSequence> {
        match self.rows.get(&self.key(t, x)) {
            Some(row) => Ok(row.next[categorical(&row.probs(), rng)].clone()),
            None => self.process.sample_step(t, x, rng),
        }
    }

    fn log_prob(&self, t: usize, next: &DiscreteSequence, prev: &DiscreteSequence) -> Result<f64> {
        match self.rows.get(&self.key(t, prev)) {
            Some(row) => Ok(row.index(next).map_or(f64::NEG_INFINITY, |j| row.logits[j] - logsumexp(&row.logits))),
            None => self.process.log_prob_step(t, next, prev),
        }
    }
}

impl DiscreteKernel for TabularPolicy<'_> {
    fn support(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<(DiscreteSequence, f64)>> {
        self.row(t, x)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(invalid("alpha must be positive and finite"))
    }
}

/// Every `(t, x_t)` with `t >= 1` reachable under the pre-trained chain.
pub fn reachable_cells(process: &MaskedProcess) -> Result<Vec<(usize, DiscreteSequence)>> {
    let mut out = Vec::new();
    let mut level = vec![DiscreteSequence::fully_masked(process.space().length)];
    for t in (1..=process.steps()).rev() {
        let mut next = BTreeMap::new();
        for x in &level {
            for (y, _) in process.support(t, x)? {
                next.insert(process.space().full_index(&y), y);
            }
        }
        out.extend(level.into_iter().map(|x| (t, x)));
        level = next.into_values().collect();
    }
    Ok(out)
}

/// Exact law of `x_0` under `kernel`, indexed like the clean states of the space.
pub fn kernel_induced_law<K: DiscreteKernel + ?Sized>(process: &MaskedProcess, kernel: &K) -> Result<Vec<f64>> {
    let space = process.space();
    let mut level: BTreeMap<usize, f64> = BTreeMap::new();
    level.insert(space.full_index(&DiscreteSequence::fully_masked(space.length)), 1.0);
    for t in (1..=process.steps()).rev() {
        let mut next = BTreeMap::new();
        for (&idx, &p) in &level {
            for (y, q) in kernel.support(t, &space.full_at(idx))? {
                *next.entry(space.full_index(&y)).or_insert(0.0) += p * q;
            }
        }
        level = next;
    }
    let mut law = vec![0.0; space.clean_size()];
    for (idx, p) in level {
        let x = space.full_at(idx);
        if !x.is_clean() {
            return Err(invalid("kernel leaves masked tokens at t = 0"));
        }
        law[space.clean_index(&x)] += p;
    }
    Ok(law)
}

/// Where distillation losses are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum RollinKind {
    /// Trajectories of the teacher, mixed per trajectory with the student.
    Teacher,
    /// Trajectories of the current student.
    Student,
    /// Forward-noised copies of clean data.
    ForwardRecycle(Vec<DiscreteSequence>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollinSpec {
    pub kind: RollinKind,
    /// Probability that a teacher-kind trajectory follows the teacher.
    pub mix: f64,
}

/// `n` roll-in trajectories, flattened into the `(t, x_t)` pairs they visit for
/// `t = T..1`. Each trajectory uses its own stream.
pub fn make_rollin(
    spec: &RollinSpec,
    teacher: &dyn Kernel<DiscreteSequence>,
    student: &TabularPolicy<'_>,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, DiscreteSequence)>> {
    if !(0.0..=1.0).contains(&spec.mix) {
        return Err(invalid("roll-in mix must lie in [0, 1]"));
    }
    let process = student.process();
    let steps = process.steps();
    let mut out = Vec::with_capacity(n * steps);
    match &spec.kind {
        RollinKind::ForwardRecycle(data) => {
            if data.is_empty() {
                return Err(invalid("forward recycling needs a non-empty dataset"));
            }
            for x0 in data {
                process.space().check(x0)?;
                if !x0.is_clean() {
                    return Err(invalid("forward recycling needs clean states"));
                }
            }
            for i in 0..n {
                let mut rng = stream(seed, i as u64, 0, Purpose::Chain);
                let x0 = &data[rng.random_range(0..data.len())];
                for t in (1..=steps).rev() {
                    out.push((t, process.forward_sample(x0, t, &mut rng)?));
                }
            }
        }
        kind => {
            for i in 0..n {
                let mut rng = stream(seed, i as u64, 0, Purpose::Chain);
                let use_teacher = *kind == RollinKind::Teacher && rng.random::<f64>() < spec.mix;
                let kernel: &dyn Kernel<DiscreteSequence> = if use_teacher { teacher } else { student };
                let mut x = process.sample_initial(&mut rng);
                for t in (1..=steps).rev() {
                    let y = kernel.sample(t, &x, &mut rng)?;
                    out.push((t, std::mem::replace(&mut x, y)));
                }
            }
        }
    }
    Ok(out)
}

/// Label each roll-in state with one teacher draw.
pub fn teacher_transitions(
    teacher: &dyn Kernel<DiscreteSequence>,
    states: &[(usize, DiscreteSequence)],
    seed: u64,
) -> Result<Vec<Transition>> {
    states
        .iter()
        .enumerate()
        .map(|(i, (t, x))| {
            let mut rng = stream(seed, i as u64, *t as u64, Purpose::Propose);
            Ok(Transition { t: *t, state: x.clone(), next: teacher.sample(*t, x, &mut rng)? })
        })
        .collect()
}

/// Which cells a fit touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistillStats {
    pub visited_cells: usize,
    pub transitions: usize,
}

/// Forward-KL distillation. Each visited row becomes the smoothed empirical
/// teacher frequencies; other rows keep their current values.
pub fn distill_kl(student: &mut TabularPolicy<'_>, transitions: &[Transition]) -> Result<DistillStats> {
    let mut counts: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for tr in transitions {
        let key = student.key(tr.t, &tr.state);
        let row = student.row_mut(tr.t, &tr.state)?;
        let j = row
            .index(&tr.next)
            .ok_or_else(|| invalid(format!("transition {} -> {} at t = {} is off the pre-trained support", tr.state, tr.next, tr.t)))?;
        let width = row.next.len();
        counts.entry(key).or_insert_with(|| vec![0.0; width])[j] += 1.0;
    }
    for (key, c) in &counts {
        let row = student.rows.get_mut(key).expect("row exists for counted cell");
        let total: f64 = c.iter().sum::<f64>() + KL_SMOOTHING * c.len() as f64;
        row.logits = c.iter().map(|n| ((n + KL_SMOOTHING) / total).ln()).collect();
    }
    Ok(DistillStats { visited_cells: counts.len(), transitions: transitions.len() })
}

fn pcl_residual<V: ValueModel<DiscreteSequence> + ?Sized>(
    student: &TabularPolicy<'_>,
    values: &V,
    alpha: f64,
    tr: &Transition,
) -> Result<f64> {
    let log_student = student.log_prob(tr.t, &tr.next, &tr.state)?;
    let log_pre = student.process.log_prob_step(tr.t, &tr.next, &tr.state)?;
    Ok(log_student - log_pre - values.value(tr.t - 1, &tr.next)? / alpha + values.value(tr.t, &tr.state)? / alpha)
}

/// Mean squared path-consistency residual
/// `log p_theta - log p_pre - v_{t-1}/alpha + v_t/alpha` over the batch.
pub fn pcl_loss<V: ValueModel<DiscreteSequence> + ?Sized>(
    student: &TabularPolicy<'_>,
    values: &V,
    alpha: f64,
    batch: &[Transition],
) -> Result<f64> {
    check_alpha(alpha)?;
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut sum = 0.0;
    for tr in batch {
        sum += pcl_residual(student, values, alpha, tr)?.powi(2);
    }
    Ok(sum / batch.len() as f64)
}

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub lr: f64,
    pub max_steps: usize,
    pub tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self { lr: 1.0, max_steps: 10_000, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimReport {
    pub steps: usize,
    pub grad_norm: f64,
}

type Grad = BTreeMap<(usize, usize), Vec<f64>>;

fn grad_norm(g: &Grad) -> f64 {
    g.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn descend(student: &mut TabularPolicy<'_>, grad: &Grad, lr: f64) {
    for (key, g) in grad {
        let row = student.rows.get_mut(key).expect("gradient rows exist");
        for (l, d) in row.logits.iter_mut().zip(g) {
            *l -= lr * d;
        }
    }
}

/// Minimize the path-consistency residuals on `batch` by gradient descent on
/// the student logits. Every distinct transition gets the same weight within
/// its cell, so rare outcomes converge as fast as common ones; the
/// zero-residual solutions are those of [`pcl_loss`].
pub fn pcl_optimize<V: ValueModel<DiscreteSequence> + ?Sized>(
    student: &mut TabularPolicy<'_>,
    values: &V,
    alpha: f64,
    batch: &[Transition],
    opts: OptimOptions,
) -> Result<OptimReport> {
    check_alpha(alpha)?;
    // Deduplicate into (cell, outcome index, target log-probability).
    let mut cells: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for tr in batch {
        let key = student.key(tr.t, &tr.state);
        let row = student.row_mut(tr.t, &tr.state)?;
        let j = row.index(&tr.next).ok_or_else(|| invalid("transition is off the pre-trained support"))?;
        let target = row.log_pre[j] + values.value(tr.t - 1, &tr.next)? / alpha - values.value(tr.t, &tr.state)? / alpha;
        let entries = cells.entry(key).or_default();
        if !entries.iter().any(|e| e.0 == j) {
            entries.push((j, target));
        }
    }
    let mut report = OptimReport { steps: 0, grad_norm: f64::INFINITY };
    while report.steps < opts.max_steps {
        let mut grad = Grad::new();
        for (key, entries) in &cells {
            let row = &student.rows[key];
            let lse = logsumexp(&row.logits);
            let probs = row.probs();
            let n = entries.len() as f64;
            let mut g = vec![0.0; row.logits.len()];
            for &(j, target) in entries {
                let w = (row.logits[j] - lse - target) / n;
                g[j] += w;
                for (gk, pk) in g.iter_mut().zip(&probs) {
                    *gk -= w * pk;
                }
            }
            grad.insert(*key, g);
        }
        report.grad_norm = grad_norm(&grad);
        if report.grad_norm < opts.tol {
            break;
        }
        descend(student, &grad, opts.lr);
        report.steps += 1;
    }
    Ok(report)
}

/// Exact gradient of `sum_cells KL(p_theta || p*)` with respect to the logits,
/// one unit weight per distinct cell in `cells`.
pub fn inverse_kl_gradient<V: ValueModel<DiscreteSequence> + ?Sized>(
    student: &mut TabularPolicy<'_>,
    values: &V,
    alpha: f64,
    cells: &[(usize, DiscreteSequence)],
) -> Result<BTreeMap<(usize, usize), Vec<f64>>> {
    check_alpha(alpha)?;
    let mut grad = Grad::new();
    for (t, x) in cells {
        let key = student.key(*t, x);
        if grad.contains_key(&key) {
            continue;
        }
        let row = student.row_mut(*t, x)?.clone();
        let probs = row.probs();
        let lse = logsumexp(&row.logits);
        let mut g = Vec::with_capacity(probs.len());
        for (j, y) in row.next.iter().enumerate() {
            g.push(row.logits[j] - lse - row.log_pre[j] - values.value(t - 1, y)? / alpha);
        }
        let mean: f64 = g.iter().zip(&probs).map(|(a, p)| a * p).sum();
        grad.insert(key, g.iter().zip(&probs).map(|(a, p)| p * (a - mean)).collect());
    }
    Ok(grad)
}

/// One inverse-KL gradient step; returns the gradient norm before the step.
pub fn distill_inverse_kl_step<V: ValueModel<DiscreteSequence> + ?Sized>(
    student: &mut TabularPolicy<'_>,
    values: &V,
    alpha: f64,
    cells: &[(usize, DiscreteSequence)],
    lr: f64,
) -> Result<f64> {
    let grad = inverse_kl_gradient(student, values, alpha, cells)?;
    descend(student, &grad, lr);
    Ok(grad_norm(&grad))
}

/// Repeat [`distill_inverse_kl_step`] until the gradient norm drops below `tol`.
pub fn inverse_kl_optimize<V: ValueModel<DiscreteSequence> + ?Sized>(
    student: &mut TabularPolicy<'_>,
    values: &V,
    alpha: f64,
    cells: &[(usize, DiscreteSequence)],
    opts: OptimOptions,
) -> Result<OptimReport> {
    let mut report = OptimReport { steps: 0, grad_norm: f64::INFINITY };
    while report.steps < opts.max_steps {
        let grad = inverse_kl_gradient(student, values, alpha, cells)?;
        report.grad_norm = grad_norm(&grad);
        if report.grad_norm < opts.tol {
            break;
        }
        descend(student, &grad, opts.lr);
        report.steps += 1;
    }
    Ok(report)
}

/// Largest total-variation distance between the rows of two kernels over `cells`.
pub fn max_row_tv<A, B>(a: &A, b: &B, cells: &[(usize, DiscreteSequence)]) -> Result<f64>
where
    A: DiscreteKernel + ?Sized,
    B: DiscreteKernel + ?Sized,
{
    let mut worst = 0.0f64;
    for (t, x) in cells {
        let ra = a.support(*t, x)?;
        let rb = b.support(*t, x)?;
        let mut tv = 0.0;
        for (y, p) in &ra {
            let q = rb.iter().find(|(z, _)| z == y).map_or(0.0, |e| e.1);
            tv += (p - q).abs();
        }
        for (z, q) in &rb {
            if !ra.iter().any(|(y, _)| y == z) {
                tv += q;
            }
        }
        worst = worst.max(0.5 * tv);
    }
    Ok(worst)
}

/// Value-based candidate selection as a single kernel: draw `m` pre-trained
/// candidates and keep one with probability proportional to `exp(v_{t-1}/alpha)`.
///
/// Its density is not tractable, so it can only be sampled.
pub struct SvddTeacher<'a, V: ?Sized> {
    pub process: &'a MaskedProcess,
    pub values: &'a V,
    pub alpha: f64,
    pub candidates: usize,
}

impl<V: ValueModel<DiscreteSequence> + ?Sized> Kernel<DiscreteSequence> for SvddTeacher<'_, V> {
    fn sample(&self, t: usize, x: &DiscreteSequence, rng: &mut StreamRng) -> Result<DiscreteSequence> {
        let mut cands = Vec::with_capacity(self.candidates);
        let mut lw = Vec::with_capacity(self.candidates);
        for _ in 0..self.candidates.max(1) {
            let y = self.process.sample_step(t, x, rng)?;
            let v = self.values.value(t - 1, &y)?;
            lw.push(if self.alpha > 0.0 { v / self.alpha } else { v });
            cands.push(y);
        }
        let j = if self.alpha > 0.0 {
            categorical(&normalize(&lw).ok_or(Error::DegenerateWeights { step: t })?, rng)
        } else {
            (0..lw.len()).fold(0, |b, k| if lw[k] > lw[b] { k } else { b })
        };
        Ok(cands.swap_remove(j))
    }

    fn log_prob(&self, _t: usize, _next: &DiscreteSequence, _prev: &DiscreteSequence) -> Result<f64> {
        Err(invalid("the selection teacher has no tractable density"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::tiny_discrete;
    use crate::oracle_metrics::{brute_force_target, tv_distance};
    use crate::processes::{Pretrained, ScheduleKind};
    use crate::rewards::Reward;
    use crate::samplers::{svdd, GuidanceConfig};
    use crate::values::ExactValues;

    fn pcl_batch(process: &MaskedProcess, n: usize) -> Vec<Transition> {
        let student = TabularPolicy::pretrained(process);
        let spec = RollinSpec { kind: RollinKind::Student, mix: 0.0 };
        let states = make_rollin(&spec, &Pretrained(process), &student, n, 3).unwrap();
        teacher_transitions(&Pretrained(process), &states, 4).unwrap()
    }

    #[test]
    fn soft_optimal_student_zeroes_pcl_and_matches_oracle() {
        let (m, r) = tiny_discrete().unwrap();
        let v = ExactValues::build(&m, &r, 1.0).unwrap();
        let star = TabularPolicy::soft_optimal(&m, &v, 1.0).unwrap();
        let batch = pcl_batch(&m, 2000);
        assert!(pcl_loss(&star, &v, 1.0, &batch).unwrap() < 1e-12);
        let pre = TabularPolicy::pretrained(&m);
        assert!(pcl_loss(&pre, &v, 1.0, &batch).unwrap() > 1e-3);
        let law = kernel_induced_law(&m, &star).unwrap();
        let oracle = brute_force_target(m.space(), &m.induced_law().unwrap(), |x| r.reward(x), 1.0).unwrap();
        assert!(tv_distance(&law, &oracle.probs).unwrap() < 1e-12);
    }

    #[test]
    fn pcl_descent_reaches_soft_optimal_rows() {
        let (m, r) = tiny_discrete().unwrap();
        let v = ExactValues::build(&m, &r, 1.0).unwrap();
        let batch = pcl_batch(&m, 20_000);
        let mut student = TabularPolicy::pretrained(&m);
        let rep = pcl_optimize(&mut student, &v, 1.0, &batch, OptimOptions::default()).unwrap();
        assert!(rep.grad_norm < 1e-6, "{rep:?}");
        let star = TabularPolicy::soft_optimal(&m, &v, 1.0).unwrap();
        // Rows the batch never visits keep their pre-trained initialization.
        let visited: Vec<_> = batch.iter().map(|b| (b.t, b.state.clone())).collect();
        assert!(max_row_tv(&student, &star, &visited).unwrap() < 0.02);
        let oracle = brute_force_target(m.space(), &m.induced_law().unwrap(), |x| r.reward(x), 1.0).unwrap();
        let law = kernel_induced_law(&m, &student).unwrap();
        assert!(tv_distance(&law, &oracle.probs).unwrap() < 0.05);
    }

    #[test]
    fn inverse_kl_is_stationary_at_optimum_and_converges() {
        let (m, r) = tiny_discrete().unwrap();
        let v = ExactValues::build(&m, &r, 1.0).unwrap();
        let cells = reachable_cells(&m).unwrap();
        let mut star = TabularPolicy::soft_optimal(&m, &v, 1.0).unwrap();
        let g = inverse_kl_gradient(&mut star, &v, 1.0, &cells).unwrap();
        assert!(grad_norm(&g) < 1e-10);
        let mut student = TabularPolicy::pretrained(&m);
        inverse_kl_optimize(&mut student, &v, 1.0, &cells, OptimOptions::default()).unwrap();
        assert!(max_row_tv(&student, &star, &cells).unwrap() < 0.02);
    }

    #[test]
    fn huge_alpha_gradient_is_kl_to_pretrained() {
        let (m, r) = tiny_discrete().unwrap();
        let v = ExactValues::build(&m, &r, 1.0).unwrap();
        let cells = reachable_cells(&m).unwrap();
        let mut student = TabularPolicy::soft_optimal(&m, &v, 1.0).unwrap();
        let g = inverse_kl_gradient(&mut student, &v, 1e12, &cells).unwrap();
        for (key, gk) in &g {
            let row = &student.rows[key];
            let p = row.probs();
            let d: Vec<f64> = p.iter().zip(&row.log_pre).map(|(q, lp)| q.ln() - lp).collect();
            let mean: f64 = d.iter().zip(&p).map(|(a, q)| a * q).sum();
            for j in 0..p.len() {
                assert!((gk[j] - p[j] * (d[j] - mean)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mode_mass_of_reverse_fit_is_not_below_forward_fit() {
        // On a tabular student both objectives share the optimum, so the reverse
        // fit can only match or exceed the mode mass of the forward fit.
        let (m, r) = tiny_discrete().unwrap();
        let v = ExactValues::build(&m, &r, 0.5).unwrap();
        let cells = reachable_cells(&m).unwrap();
        let mut rev = TabularPolicy::pretrained(&m);
        inverse_kl_optimize(&mut rev, &v, 0.5, &cells, OptimOptions::default()).unwrap();
        let star = TabularPolicy::soft_optimal(&m, &v, 0.5).unwrap();
        let mut fwd = TabularPolicy::pretrained(&m);
        let spec = RollinSpec { kind: RollinKind::Teacher, mix: 1.0 };
        let states = make_rollin(&spec, &star, &fwd.clone(), 20_000, 1).unwrap();
        distill_kl(&mut fwd, &teacher_transitions(&star, &states, 2).unwrap()).unwrap();
        let mode = |law: Vec<f64>| law.into_iter().fold(0.0f64, f64::max);
        let a = mode(kernel_induced_law(&m, &rev).unwrap());
        let b = mode(kernel_induced_law(&m, &fwd).unwrap());
        assert!(a >= b - 0.01, "{a} {b}");
    }

    #[test]
    fn self_distillation_recovers_pretrained_rows() {
        let (m, _) = tiny_discrete().unwrap();
        let mut student = TabularPolicy::pretrained(&m);
        let spec = RollinSpec { kind: RollinKind::Teacher, mix: 1.0 };
        let states = make_rollin(&spec, &Pretrained(&m), &student.clone(), 100_000, 9).unwrap();
        let trs = teacher_transitions(&Pretrained(&m), &states, 10).unwrap();
        let stats = distill_kl(&mut student, &trs).unwrap();
        assert_eq!(stats.transitions, 800_000);
        let cells: Vec<_> = reachable_cells(&m).unwrap();
        // Cells seen at least ten thousand times are within 0.02 of the pre-trained row.
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for tr in &trs {
            *counts.entry(student.key(tr.t, &tr.state)).or_default() += 1;
        }
        let busy: Vec<_> = cells.into_iter().filter(|(t, x)| counts.get(&student.key(*t, x)).copied().unwrap_or(0) >= 10_000).collect();
        assert!(!busy.is_empty());
        assert!(max_row_tv(&student, &Pretrained(&m), &busy).unwrap() < 0.02);
    }

    #[test]
    fn closed_form_row_is_empirical_frequency() {
        let (m, _) = tiny_discrete().unwrap();
        let x = DiscreteSequence::fully_masked(2);
        let y1: DiscreteSequence = "A*".parse().unwrap();
        let y2: DiscreteSequence = "**".parse().unwrap();
        let trs = vec![
            Transition { t: 8, state: x.clone(), next: y1.clone() },
            Transition { t: 8, state: x.clone(), next: y1.clone() },
            Transition { t: 8, state: x.clone(), next: y2.clone() },
        ];
        let mut student = TabularPolicy::pretrained(&m);
        distill_kl(&mut student, &trs).unwrap();
        let row = student.row(8, &x).unwrap();
        let p = |y: &DiscreteSequence| row.iter().find(|e| &e.0 == y).unwrap().1;
        assert!((p(&y1) - 2.0 / 3.0).abs() < 1e-8);
        assert!((p(&y2) - 1.0 / 3.0).abs() < 1e-8);
        // Untouched cells keep the pre-trained row.
        let other: DiscreteSequence = "A*".parse().unwrap();
        assert_eq!(student.row(4, &other).unwrap(), m.support(4, &other).unwrap());
    }

    #[test]
    fn forward_recycling_masks_at_the_schedule_rate() {
        let (m, _) = crate::instances::tiny_discrete_with(ScheduleKind::Linear, 9).unwrap();
        // abar_5 = 0.5 exactly on the nine-step linear schedule.
        assert!((m.schedule().alpha_bar(5) - 0.5).abs() < 1e-12);
        let student = TabularPolicy::pretrained(&m);
        let data = vec!["AB".parse().unwrap(), "BB".parse().unwrap()];
        let spec = RollinSpec { kind: RollinKind::ForwardRecycle(data), mix: 0.0 };
        let states = make_rollin(&spec, &Pretrained(&m), &student, 20_000, 5).unwrap();
        let at5: Vec<_> = states.iter().filter(|(t, _)| *t == 5).collect();
        let masked = at5.iter().map(|(_, x)| x.masked_positions().count()).sum::<usize>() as f64;
        assert!((masked / (2.0 * at5.len() as f64) - 0.5).abs() < 0.01);
        let empty = RollinSpec { kind: RollinKind::ForwardRecycle(vec![]), mix: 0.0 };
        assert!(make_rollin(&empty, &Pretrained(&m), &student, 1, 0).is_err());
    }

    #[test]
    fn pretrained_student_rollin_follows_pretrained_marginals() {
        let (m, _) = tiny_discrete().unwrap();
        let student = TabularPolicy::pretrained(&m);
        let spec = RollinSpec { kind: RollinKind::Student, mix: 0.0 };
        let states = make_rollin(&spec, &Pretrained(&m), &student, 20_000, 6).unwrap();
        let full = states.iter().filter(|(t, x)| *t == 4 && x.masked_positions().count() == 2).count() as f64 / 20_000.0;
        // Each position is still masked at t = 4 with probability 1 - abar_4.
        let keep = 1.0 - m.schedule().alpha_bar(4);
        assert!((full - keep * keep).abs() < 0.01);
    }

    #[test]
    fn distilled_proposal_raises_local_ess() {
        let (m, r) = tiny_discrete().unwrap();
        let v = ExactValues::build(&m, &r, 1.0).unwrap();
        let star = TabularPolicy::soft_optimal(&m, &v, 1.0).unwrap();
        let cfg = GuidanceConfig { alpha: 1.0, particles: 2000, candidates: 4, seed: 7, ..Default::default() };
        let base = svdd(&m, &v, None, &cfg).unwrap().local_ess.unwrap();
        let tuned = svdd(&m, &v, Some(&star), &cfg).unwrap().local_ess.unwrap();
        assert!(tuned > base);
        assert!((tuned - 1.0).abs() < 1e-9);
    }

    #[test]
    fn students_serialize_as_tables() {
        let (m, r) = tiny_discrete().unwrap();
        let v = ExactValues::build(&m, &r, 1.0).unwrap();
        let star = TabularPolicy::soft_optimal(&m, &v, 1.0).unwrap();
        let mut buf = Vec::new();
        star.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,state,next,prob\n1,"));
        assert_eq!(text.lines().count(), 1 + star.table().len());
    }
}
