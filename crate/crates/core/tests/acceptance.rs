//! Acceptance suite. Runs every criterion on one worker thread, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::time::{Duration, Instant};

use softguide::distill::{
    distill_kl, kernel_induced_law, make_rollin, max_row_tv, pcl_optimize, teacher_transitions, OptimOptions,
    RollinKind, RollinSpec, SvddTeacher, TabularPolicy,
};
use softguide::geometry_so3::RotationState;
use softguide::instances::{binary_masked, gaussian_1d, so3_mode, tiny_discrete};
use softguide::oracle_metrics::{brute_force_target, empirical_discrete, tv_distance};
use softguide::processes::{DiscreteSequence, GaussianMixture, Kernel, MaskedProcess, Pretrained, Process, ScheduleKind};
use softguide::rewards::{Reward, RewardModel};
use softguide::rng::{stream, Purpose};
use softguide::samplers::{
    beam_search, classifier_guidance, discrete_guidance, initial_state, nested_smc, sample_pretrained, smc_guidance,
    svdd, svdd_chain, walk_jump, DiscreteGuidance, DiscreteGuidedKernel, GuidanceConfig, GuidedSo3Kernel,
    WalkJumpConfig,
};
use softguide::search_refine::{refine, Acceptance, RefineConfig};
use softguide::values::{
    mc_regression, soft_q_iteration, ExactValues, Features, FitOptions, GaussianTiltValue, PosteriorMeanValue,
    ValueModel,
};

type Outcome = Result<(bool, String), softguide::Error>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn tiny_oracle(m: &MaskedProcess, r: &RewardModel, alpha: f64) -> Vec<f64> {
    brute_force_target(m.space(), &m.induced_law().unwrap(), |x| r.reward(x), alpha).unwrap().probs
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn target_law_recovery() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let v = ExactValues::build(&m, &r, 1.0)?;
    let oracle = tiny_oracle(&m, &r, 1.0);
    let space = m.space();
    let cfg = GuidanceConfig { alpha: 1.0, particles: 10_000, candidates: 16, seed: 1, ..Default::default() };
    let mut slowest = Duration::ZERO;
    let mut timed = |f: &dyn Fn() -> softguide::Result<Vec<DiscreteSequence>>| -> softguide::Result<f64> {
        let start = Instant::now();
        let xs = f()?;
        slowest = slowest.max(start.elapsed());
        tv_distance(&empirical_discrete(space, &xs)?, &oracle)
    };
    let smc = timed(&|| Ok(smc_guidance(&m, &v, None, &cfg)?.samples))?;
    let local = timed(&|| Ok(svdd(&m, &v, None, &cfg)?.samples))?;
    let nested = timed(&|| Ok(nested_smc(&m, &v, None, &GuidanceConfig { candidates: 4, ..cfg })?.samples))?;
    let exact = timed(&|| Ok(discrete_guidance(&m, &v, 1.0, DiscreteGuidance::Exact, 100_000, 2)?.samples))?;
    let pass = smc < 0.05 && local < 0.05 && nested < 0.05 && exact < 0.02 && slowest < Duration::from_secs(60);
    Ok((
        pass,
        format!(
            "TV smc={smc:.4} svdd={local:.4} nested={nested:.4} exact-guidance={exact:.4}, slowest run {:.2} s",
            slowest.as_secs_f64()
        ),
    ))
}

fn soft_bellman() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let v = ExactValues::build(&m, &r, 1.0)?;
    let space = m.space();
    let mut worst = 0.0f64;
    for t in 1..=m.steps() {
        for i in 0..space.full_size() {
            let x = space.full_at(i);
            // States the data law cannot complete carry no mass and no value.
            if v.scaled_value(t, &x).is_finite() {
                worst = worst.max(v.soft_bellman_residual(&m, t, &x)?);
            }
        }
    }
    Ok((worst < 1e-10, format!("max residual {worst:.3e}")))
}

fn continuous_guidance() -> Outcome {
    let (g, _) = gaussian_1d(ScheduleKind::Linear, 1000)?;
    let v = GaussianTiltValue::new(&g, vec![1.0], 0.0, 1.0)?;
    let xs: Vec<f64> = classifier_guidance(&g, &v, 1.0, 100_000, 3)?.samples.into_iter().map(|x| x[0]).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let pass = (mean - 1.0).abs() <= 0.05 && (var - 1.0).abs() <= 0.1;
    Ok((pass, format!("mean {mean:.4} variance {var:.4}")))
}

fn value_estimators() -> Outcome {
    // Cosine schedule: under the linear one the masked cell at t = 1 is almost
    // never visited, so a max over visited cells would rest on a handful of rollouts.
    let (m, r) = binary_masked(ScheduleKind::Cosine, 8)?;
    let exact = ExactValues::build(&m, &r, 1.0)?;
    let opts = FitOptions { alpha: 1.0, rollouts: 100_000, iterations: None, seed: 4 };
    let mc = mc_regression(&m, &r, Box::new(PosteriorMeanValue::new(&m, &r)), Features::Tabular, opts)?;
    let fq = soft_q_iteration(&m, &r, Box::new(PosteriorMeanValue::new(&m, &r)), Features::Tabular, opts)?;
    let space = m.space();
    let (mut e_mc, mut e_fq) = (0.0f64, 0.0f64);
    let mut cells = 0;
    for t in 1..=m.steps() {
        for i in 0..space.full_size() {
            let x = space.full_at(i);
            let want = exact.value(t, &x)?;
            if mc.covers(t, &x) {
                e_mc = e_mc.max((mc.value(t, &x)? - want).abs());
                cells += 1;
            }
            if fq.covers(t, &x) {
                e_fq = e_fq.max((fq.value(t, &x)? - want).abs());
            }
        }
    }
    Ok((e_mc < 0.02 && e_fq < 0.02, format!("max-cell error mc={e_mc:.4} fqi={e_fq:.4} over {cells} cells")))
}

fn compute_scaling() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let v = ExactValues::build(&m, &r, 1.0)?;
    let mut pass = true;
    let mut detail = String::new();
    for (name, beam) in [("beam", true), ("svdd", false)] {
        let mut prev: Option<(f64, f64)> = None;
        detail.push_str(name);
        for mc in [1, 2, 4, 8, 16] {
            let cfg = GuidanceConfig { alpha: 1.0, particles: 1000, candidates: mc, seed: 5, ..Default::default() };
            let rep = if beam { beam_search(&m, &v, None, &cfg)? } else { svdd(&m, &v, None, &cfg)? };
            let rs: Vec<f64> = rep.samples.iter().map(|x| r.reward(x)).collect();
            let (mean, se) = mean_se(&rs);
            if let Some((pm, pse)) = prev {
                pass &= mean >= pm - 2.0 * (se * se + pse * pse).sqrt();
            }
            prev = Some((mean, se));
            detail.push_str(&format!(" M{mc}={mean:.3}"));
        }
        detail.push(';');
    }
    Ok((pass, detail))
}

fn reduction_web() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let v = ExactValues::build(&m, &r, 1.0)?;
    let mut pass = true;
    for seed in 0..10 {
        let one = GuidanceConfig { alpha: 1.0, particles: 500, candidates: 1, seed, ..Default::default() };
        pass &= svdd(&m, &v, None, &one)?.samples == sample_pretrained(&m, 500, seed)?;
        let greedy = GuidanceConfig { alpha: 0.0, candidates: 6, ..one };
        pass &= svdd(&m, &v, None, &greedy)?.samples == beam_search(&m, &v, None, &greedy)?.samples;
    }
    Ok((pass, "svdd(M=1) = proposal, svdd(alpha=0) = beam over 10 seeds".into()))
}

fn nested_normalizer() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let z = ExactValues::build(&m, &r, 1.0)?.log_z().exp();
    // Approximate values make the weights non-trivial.
    let v = PosteriorMeanValue::new(&m, &r);
    let mut est = Vec::with_capacity(100);
    for seed in 0..100 {
        let cfg = GuidanceConfig { alpha: 1.0, particles: 200, candidates: 4, seed, ..Default::default() };
        est.push(nested_smc(&m, &v, None, &cfg)?.log_z.expect("nested SMC estimates Z").exp());
    }
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let rel = (mean / z - 1.0).abs();
    Ok((rel < 0.05, format!("Z={z:.5} mean estimate={mean:.5} relative error={rel:.4}")))
}

fn so3_guidance_check() -> Outcome {
    let (p, r) = so3_mode(50, 2.0)?;
    let v = PosteriorMeanValue::new(&p, &r);
    let guided = GuidedSo3Kernel { process: &p, values: &v, alpha: 0.5 };
    let pre = Pretrained(&p);
    let n = 1000;
    let mut diffs = Vec::with_capacity(n);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut ends = [0.0; 2];
        for (slot, kernel) in [&guided as &dyn Kernel<RotationState>, &pre].into_iter().enumerate() {
            let mut x = initial_state(&p, 8, i);
            worst = worst.max(x.orthonormality_error());
            for t in (1..=p.steps()).rev() {
                x = kernel.sample(t, &x, &mut stream(8, i as u64, t as u64, Purpose::Propose))?;
                worst = worst.max(x.orthonormality_error());
            }
            ends[slot] = r.reward(&x);
        }
        diffs.push(ends[0] - ends[1]);
    }
    let (mean, se) = mean_se(&diffs);
    Ok((mean > 3.0 * se && worst < 1e-9, format!("paired gain {mean:.4} ({:.1} SE), max |R^T R - I| {worst:.2e}", mean / se)))
}

fn taylor_vs_exact() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let v = ExactValues::build(&m, &r, 1.0)?;
    let exact = kernel_induced_law(&m, &DiscreteGuidedKernel::new(&m, &v, 1.0, DiscreteGuidance::Exact)?)?;
    let taylor = kernel_induced_law(&m, &DiscreteGuidedKernel::new(&m, &v, 1.0, DiscreteGuidance::Taylor)?)?;
    let tv = tv_distance(&exact, &taylor)?;
    Ok((tv < 0.05, format!("TV between enumerated laws {tv:.4}")))
}

fn distillation() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let v = ExactValues::build(&m, &r, 1.0)?;
    let teacher = SvddTeacher { process: &m, values: &v, alpha: 1.0, candidates: 8 };
    let mut student = TabularPolicy::pretrained(&m);
    let spec = RollinSpec { kind: RollinKind::Teacher, mix: 1.0 };
    let states = make_rollin(&spec, &teacher, &student.clone(), 100_000, 10)?;
    distill_kl(&mut student, &teacher_transitions(&teacher, &states, 11)?)?;
    let cfg = GuidanceConfig { alpha: 1.0, particles: 100_000, candidates: 8, seed: 12, ..Default::default() };
    let teacher_law = empirical_discrete(m.space(), &svdd(&m, &v, None, &cfg)?.samples)?;
    let kl_tv = tv_distance(&kernel_induced_law(&m, &student)?, &teacher_law)?;

    let pre = TabularPolicy::pretrained(&m);
    let spec = RollinSpec { kind: RollinKind::Student, mix: 0.0 };
    let states = make_rollin(&spec, &Pretrained(&m), &pre, 20_000, 13)?;
    let batch = teacher_transitions(&Pretrained(&m), &states, 14)?;
    let mut pcl = TabularPolicy::pretrained(&m);
    pcl_optimize(&mut pcl, &v, 1.0, &batch, OptimOptions::default())?;
    let star = TabularPolicy::soft_optimal(&m, &v, 1.0)?;
    let row_tv = max_row_tv(&pcl, &star, &states)?;
    Ok((kl_tv < 0.05 && row_tv < 0.02, format!("forward-KL student TV {kl_tv:.4}, PCL max row TV {row_tv:.2e}")))
}

fn refinement() -> Outcome {
    let (m, r) = tiny_discrete()?;
    let v = ExactValues::build(&m, &r, 1.0)?;
    let seed: DiscreteSequence = "AA".parse()?;
    let cfg = RefineConfig { iterations: 20, noise_level: 4, max_distance: Some(1.0), acceptance: Acceptance::Greedy, seed: 15 };
    let denoise = |t0: usize, x: DiscreteSequence, s: u64| {
        let g = GuidanceConfig { alpha: 1.0, candidates: 4, seed: s, ..Default::default() };
        svdd_chain(&m, &v, None, &g, 0, t0, x, false).map(|o| o.0)
    };
    let (_, trace) = refine(&m, &r, &seed, denoise, |a, b| a.hamming(b) as f64, &cfg)?;
    let within = trace.iter().all(|s| s.distance <= 1.0);
    let monotone = trace.windows(2).all(|w| w[1].current_reward >= w[0].current_reward);
    let accepted = trace.iter().filter(|s| s.accepted).count();
    let last = trace.last().map_or(f64::NAN, |s| s.current_reward);
    Ok((within && monotone && trace.len() == 20, format!("{accepted} accepted, final reward {last}")))
}

fn walk_jump_check() -> Outcome {
    let data = GaussianMixture::standard(1)?;
    let reward = RewardModel::Linear { coef: vec![1.0], offset: 0.0 };
    let cfg = WalkJumpConfig { sigma: 0.5, alpha: 1.0, step: 0.1, burn_in: 10_000, samples: 99_000, thin: 10, seed: 16 };
    let rep = walk_jump(&data, &reward, &cfg)?;
    let mean = rep.walk.iter().map(|y| y[0]).sum::<f64>() / rep.walk.len() as f64;
    // Tilting N(0, 1 + sigma^2) by exp(y / alpha) shifts its mean to (1 + sigma^2) / alpha.
    let want = 1.25;
    Ok(((mean - want).abs() < 0.05, format!("walk mean {mean:.4} vs {want}")))
}

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("fresh global pool");
    let criteria = [
        Criterion { id: 1, name: "target-law recovery", budget: Duration::from_secs(240), run: target_law_recovery },
        Criterion { id: 2, name: "soft-Bellman residual", budget: Duration::from_secs(1), run: soft_bellman },
        Criterion { id: 3, name: "continuous classifier guidance", budget: Duration::from_secs(120), run: continuous_guidance },
        Criterion { id: 4, name: "value-estimator convergence", budget: Duration::from_secs(60), run: value_estimators },
        Criterion { id: 5, name: "compute scaling", budget: Duration::from_secs(600), run: compute_scaling },
        Criterion { id: 6, name: "reduction web", budget: Duration::from_secs(10), run: reduction_web },
        Criterion { id: 7, name: "nested-SMC normalizer", budget: Duration::from_secs(120), run: nested_normalizer },
        Criterion { id: 8, name: "SO(3) guidance", budget: Duration::from_secs(120), run: so3_guidance_check },
        Criterion { id: 9, name: "Taylor vs exact discrete guidance", budget: Duration::from_secs(120), run: taylor_vs_exact },
        Criterion { id: 10, name: "distillation", budget: Duration::from_secs(300), run: distillation },
        Criterion { id: 11, name: "refinement", budget: Duration::from_secs(60), run: refinement },
        Criterion { id: 12, name: "walk-jump", budget: Duration::from_secs(120), run: walk_jump_check },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (ok && took <= c.budget, d),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {:2} {:<34} {}  {} [{:.2} s of {} s]",
            c.id,
            c.name,
            if ok { "PASS" } else { "FAIL" },
            detail,
            took.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
