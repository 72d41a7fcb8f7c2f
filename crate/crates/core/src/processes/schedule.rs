//! Cumulative noise schedules.
//!
//! Index `t = T` is pure noise (fully masked), `t = 0` is data. `abar[0] = 1`.

use crate::error::{invalid, Result};

/// Floor and ceiling offset used by the built-in schedules.
pub const SCHEDULE_EPS: f64 = 1e-4;

/// Built-in schedule families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Cumulative signal levels `abar_0 = 1 >= abar_1 >= ... >= abar_T > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    abar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build one of the built-in schedules with `steps >= 1`.
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let eps = SCHEDULE_EPS;
        let mut abar = Vec::with_capacity(steps + 1);
        abar.push(1.0);
        for t in 1..=steps {
            let v = match kind {
                ScheduleKind::Linear if steps == 1 => eps,
                ScheduleKind::Linear => {
                    (1.0 - eps) + (t - 1) as f64 / (steps - 1) as f64 * (2.0 * eps - 1.0)
                }
                ScheduleKind::Cosine => {
                    let s = 0.008;
                    let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                    (f(t as f64 / steps as f64) / f(0.0)).clamp(eps, 1.0 - eps)
                }
            };
            abar.push(v);
        }
        Self::from_alpha_bar(abar)
    }

    /// Wrap an explicit table; `abar[0]` must be 1 and the rest non-increasing in `(0, 1]`.
    pub fn from_alpha_bar(abar: Vec<f64>) -> Result<Self> {
        if abar.len() < 2 {
            return Err(invalid("schedule needs abar_0 and at least one step"));
        }
        if (abar[0] - 1.0).abs() > 1e-15 {
            return Err(invalid("abar_0 must equal 1"));
        }
        for w in abar.windows(2) {
            if !(w[1] > 0.0 && w[1] <= w[0]) {
                return Err(invalid("abar must be strictly positive and non-increasing"));
            }
        }
        Ok(Self { abar })
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.abar.len() - 1
    }

    /// Cumulative level `abar_t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.abar[t]
    }

    /// Per-step level `alpha_t = abar_t / abar_{t-1}` for `t >= 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.abar[t] / self.abar[t - 1]
    }

    /// Backward-step variance of the Gaussian posterior, `t >= 1`.
    pub fn sigma2(&self, t: usize) -> f64 {
        let one_minus = 1.0 - self.abar[t];
        if one_minus <= 0.0 {
            return 0.0;
        }
        (1.0 - self.alpha(t)) * (1.0 - self.abar[t - 1]) / one_minus
    }

    /// Time increment of one step on the unit interval.
    pub fn dt(&self) -> f64 {
        1.0 / self.steps() as f64
    }
}
