//! Soft value functions `v_t(x) = alpha log E[exp(r(x_0)/alpha) | x_t = x]`
//! and their estimators.

mod closed_form;
mod exact;
mod fitted;
mod posterior;

pub use closed_form::GaussianTiltValue;
pub use exact::{exact_value_discrete, ExactValues};
pub use fitted::{mc_regression, soft_q_iteration, CellKey, FeatureMap, Features, FittedValues, FitOptions};
pub use posterior::PosteriorMeanValue;

use crate::error::Result;
use crate::processes::ContinuousState;

/// Central finite-difference step for value gradients.
pub const FD_STEP: f64 = 1e-4;

/// Where a value estimate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Exact,
    ClosedForm,
    PosteriorMean,
    MonteCarloRegression,
    SoftQIteration,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::ClosedForm => "closed_form",
            Self::PosteriorMean => "posterior_mean",
            Self::MonteCarloRegression => "mc_regression",
            Self::SoftQIteration => "soft_q_iteration",
        })
    }
}

/// A soft value table indexed by step and state.
pub trait ValueModel<S>: Send + Sync {
    fn value(&self, t: usize, x: &S) -> Result<f64>;
    fn provenance(&self) -> Provenance;
}

impl<S, V: ValueModel<S> + ?Sized> ValueModel<S> for &V {
    fn value(&self, t: usize, x: &S) -> Result<f64> {
        (**self).value(t, x)
    }

    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
}

/// Values on `R^d` with a spatial gradient.
pub trait ContinuousValue: ValueModel<ContinuousState> {
    /// Defaults to central differences with step [`FD_STEP`].
    fn gradient(&self, t: usize, x: &ContinuousState) -> Result<Vec<f64>> {
        finite_difference(|y| self.value(t, y), x, FD_STEP)
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference(f: impl Fn(&ContinuousState) -> Result<f64>, x: &ContinuousState, h: f64) -> Result<Vec<f64>> {
    let mut y = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for d in 0..x.len() {
        y[d] = x[d] + h;
        let up = f(&y)?;
        y[d] = x[d] - h;
        let down = f(&y)?;
        y[d] = x[d];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Values on SO(3) with a Riemannian gradient in body-frame coordinates.
pub trait RotationValue: ValueModel<crate::geometry_so3::RotationState> {
    /// Defaults to central differences along the three body-frame generators.
    fn riemannian_gradient(
        &self,
        t: usize,
        x: &crate::geometry_so3::RotationState,
    ) -> Result<crate::geometry_so3::TangentVector> {
        use crate::geometry_so3::{so3_exp, TangentVector};
        let mut out = TangentVector::zeros();
        for d in 0..3 {
            let mut e = TangentVector::zeros();
            e[d] = FD_STEP;
            let up = self.value(t, &so3_exp(x, &e))?;
            let down = self.value(t, &so3_exp(x, &-e))?;
            // The metric is twice the coordinate dot product.
            out[d] = (up - down) / (4.0 * FD_STEP);
        }
        Ok(out)
    }
}
