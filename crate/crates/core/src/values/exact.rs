use crate::error::{invalid, Error, Result};
use crate::processes::{DiscreteSequence, MaskedProcess, Process, SeqSpace, MASK};
use crate::rewards::Reward;

use super::{Provenance, ValueModel};

/// Support-size budget for the exact backward recursion.
const WORK_CAP: u64 = 50_000_000;

/// Exact soft values of a masked process on every state and step.
///
/// Values are stored as `v_t(x) / alpha`. States unreachable under the data law
/// hold `-inf`. At `t = 0` a masked state is resolved by one forced draw from the
/// denoiser.
#[derive(Debug, Clone)]
pub struct ExactValues {
    space: SeqSpace,
    alpha: f64,
    scaled: Vec<Vec<f64>>,
}

impl ExactValues {
    pub fn build<R: Reward<DiscreteSequence>>(process: &MaskedProcess, reward: &R, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("exact values need a finite alpha > 0"));
        }
        let space = process.space();
        let full = space.full_size();
        let work = full as u64 * (space.vocab as u64 + 1).pow(space.length as u32) * process.steps() as u64;
        if work > WORK_CAP {
            return Err(Error::TooLarge { states: work, cap: WORK_CAP });
        }
        let clean: Vec<f64> = space.clean_states().map(|y| reward.reward(&y) / alpha).collect();
        let mut level0 = vec![f64::NEG_INFINITY; full];
        for (si, slot) in level0.iter_mut().enumerate() {
            let x = space.full_at(si);
            *slot = if x.is_clean() {
                clean[space.clean_index(&x)]
            } else {
                match process.denoiser(&x) {
                    Ok(rows) => resolve_masked(&space, &x, &rows, &clean),
                    Err(Error::ZeroSupport) => f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                }
            };
        }
        let mut scaled = vec![level0];
        for t in 1..=process.steps() {
            let prev = &scaled[t - 1];
            let mut cur = vec![f64::NEG_INFINITY; full];
            for (si, slot) in cur.iter_mut().enumerate() {
                let x = space.full_at(si);
                let support = match process.support(t, &x) {
                    Ok(s) => s,
                    Err(Error::ZeroSupport) => continue,
                    Err(e) => return Err(e),
                };
                let terms: Vec<f64> =
                    support.iter().map(|(y, p)| p.ln() + prev[space.full_index(y)]).collect();
                *slot = crate::oracle_metrics::logsumexp(&terms);
            }
            scaled.push(cur);
        }
        Ok(Self { space, alpha, scaled })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Log normalizer `log E_pre[exp(r/alpha)]` of the tilted target.
    pub fn log_z(&self) -> f64 {
        let top = self.scaled.len() - 1;
        self.scaled[top][self.space.full_index(&DiscreteSequence::fully_masked(self.space.length))]
    }

    /// `v_t(x) / alpha`.
    pub fn scaled_value(&self, t: usize, x: &DiscreteSequence) -> f64 {
        self.scaled[t][self.space.full_index(x)]
    }

    /// `|E_pre[exp(v_{t-1}/alpha) | x_t] - exp(v_t(x_t)/alpha)|`.
    pub fn soft_bellman_residual(&self, process: &MaskedProcess, t: usize, x: &DiscreteSequence) -> Result<f64> {
        let lhs: f64 = process
            .support(t, x)?
            .iter()
            .map(|(y, p)| p * self.scaled_value(t - 1, y).exp())
            .sum();
        Ok((lhs - self.scaled_value(t, x).exp()).abs())
    }
}

fn resolve_masked(space: &SeqSpace, x: &DiscreteSequence, rows: &[Vec<f64>], clean: &[f64]) -> f64 {
    let terms: Vec<f64> = space
        .clean_states()
        .filter(|y| x.0.iter().zip(&y.0).all(|(&a, &b)| a == MASK || a == b))
        .map(|y| {
            let w: f64 = y.0.iter().enumerate().map(|(pos, &k)| rows[pos][k as usize]).product();
            w.ln() + clean[space.clean_index(&y)]
        })
        .collect();
    crate::oracle_metrics::logsumexp(&terms)
}

impl ValueModel<DiscreteSequence> for ExactValues {
    fn value(&self, t: usize, x: &DiscreteSequence) -> Result<f64> {
        if t >= self.scaled.len() {
            return Err(invalid(format!("step {t} beyond T = {}", self.scaled.len() - 1)));
        }
        self.space.check(x)?;
        Ok(self.alpha * self.scaled_value(t, x))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Exact
    }
}

/// One-off exact value `v_t(x)`.
pub fn exact_value_discrete<R: Reward<DiscreteSequence>>(
    process: &MaskedProcess,
    reward: &R,
    alpha: f64,
    t: usize,
    x: &DiscreteSequence,
) -> Result<f64> {
    ExactValues::build(process, reward, alpha)?.value(t, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::{NoiseSchedule, ScheduleKind};
    use crate::rewards::RewardModel;
    use proptest::prelude::*;

    fn binary(steps: usize) -> (MaskedProcess, RewardModel) {
        let sp = SeqSpace::new(2, 1).unwrap();
        let m = MaskedProcess::new(NoiseSchedule::new(ScheduleKind::Linear, steps).unwrap(), sp, vec![0.75, 0.25]).unwrap();
        let r = RewardModel::table(sp, &[("B".parse().unwrap(), 1.0)], 0.0).unwrap();
        (m, r)
    }

    #[test]
    fn fully_masked_binary_example() {
        let (m, r) = binary(4);
        let v = exact_value_discrete(&m, &r, 1.0, 4, &"*".parse().unwrap()).unwrap();
        assert!((v - (0.75 + 0.25 * std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((v - 0.357_374_019_508_788).abs() < 1e-12);
    }

    #[test]
    fn clean_states_keep_their_reward() {
        let (m, r) = binary(4);
        let ev = ExactValues::build(&m, &r, 0.5).unwrap();
        for t in 0..=4 {
            assert!((ev.value(t, &"B".parse().unwrap()).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        let (m, r) = binary(4);
        assert!(ExactValues::build(&m, &r, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn soft_bellman_holds_everywhere(
            data in proptest::collection::vec(0.05f64..1.0, 9),
            rew in proptest::collection::vec(-2.0f64..2.0, 9),
            alpha in 0.2f64..3.0,
        ) {
            let sp = SeqSpace::new(3, 2).unwrap();
            let m = MaskedProcess::new(NoiseSchedule::new(ScheduleKind::Linear, 5).unwrap(), sp, data).unwrap();
            let r = RewardModel::Table { space: sp, values: rew };
            let ev = ExactValues::build(&m, &r, alpha).unwrap();
            for t in 1..=5 {
                for i in 0..sp.full_size() {
                    let res = ev.soft_bellman_residual(&m, t, &sp.full_at(i)).unwrap();
                    prop_assert!(res < 1e-10, "t={} state={} residual={}", t, sp.full_at(i), res);
                }
            }
        }
    }
}
