use super::{sample_with_kernel, SamplerReport};
use crate::error::{invalid, Result};
use crate::processes::masked::{product_support, PositionKernel, StepProbs};
use crate::processes::{DiscreteKernel, DiscreteSequence, Kernel, MaskedProcess};
use crate::rng::StreamRng;
use crate::values::ValueModel;

/// How unmasking rates are reweighted by the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscreteGuidance {
    /// Multiply by `exp((v_{t-1}(x') - v_{t-1}(x_t)) / alpha)`.
    Exact,
    /// First-order form `1 + (v_{t-1}(x') - v_{t-1}(x_t)) / alpha`, floored at zero.
    Taylor,
}

/// Guided masked-diffusion kernel acting independently on each position.
///
/// `x'` is `x_t` with one position unmasked. The probability of staying masked is
/// the complement of the reweighted unmasking mass. When that complement would
/// be negative, or the pre-trained kernel never keeps the mask, the unmasking
/// probabilities are renormalized instead.
pub struct DiscreteGuidedKernel<'a, V: ?Sized> {
    pub process: &'a MaskedProcess,
    pub values: &'a V,
    pub alpha: f64,
    pub mode: DiscreteGuidance,
}

impl<'a, V: ValueModel<DiscreteSequence> + ?Sized> DiscreteGuidedKernel<'a, V> {
    pub fn new(process: &'a MaskedProcess, values: &'a V, alpha: f64, mode: DiscreteGuidance) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(invalid("discrete guidance needs alpha > 0"));
        }
        Ok(Self { process, values, alpha, mode })
    }

    pub fn position_kernels(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<PositionKernel>> {
        let pre = self.process.position_kernels(t, x)?;
        let base = self.values.value(t - 1, x)?;
        if !base.is_finite() {
            return Ok(pre);
        }
        pre.into_iter()
            .enumerate()
            .map(|(pos, k)| {
                let PositionKernel::Masked(p) = k else { return Ok(k) };
                let mut unmask = Vec::with_capacity(p.unmask.len());
                for (tok, &q) in p.unmask.iter().enumerate() {
                    if q == 0.0 {
                        unmask.push(0.0);
                        continue;
                    }
                    let d = (self.values.value(t - 1, &x.with_token(pos, tok as u8))? - base) / self.alpha;
                    let f = match self.mode {
                        DiscreteGuidance::Exact => d.exp(),
                        DiscreteGuidance::Taylor => (1.0 + d).max(0.0),
                    };
                    unmask.push(q * f);
                }
                let mass: f64 = unmask.iter().sum();
                if mass == 0.0 {
                    return Ok(PositionKernel::Masked(p));
                }
                if p.stay == 0.0 || mass > 1.0 {
                    unmask.iter_mut().for_each(|u| *u /= mass);
                    return Ok(PositionKernel::Masked(StepProbs { stay: 0.0, unmask }));
                }
                Ok(PositionKernel::Masked(StepProbs { stay: 1.0 - mass, unmask }))
            })
            .collect()
    }
}

impl<V: ValueModel<DiscreteSequence> + ?Sized> Kernel<DiscreteSequence> for DiscreteGuidedKernel<'_, V> {
    fn sample(&self, t: usize, x: &DiscreteSequence, rng: &mut StreamRng) -> Result<DiscreteSequence> {
        let ks = self.position_kernels(t, x)?;
        Ok(DiscreteSequence(ks.iter().map(|k| k.sample(rng)).collect()))
    }

    fn log_prob(&self, t: usize, next: &DiscreteSequence, prev: &DiscreteSequence) -> Result<f64> {
        let ks = self.position_kernels(t, prev)?;
        Ok(ks.iter().zip(&next.0).map(|(k, &v)| k.prob(v).ln()).sum())
    }
}

impl<V: ValueModel<DiscreteSequence> + ?Sized> DiscreteKernel for DiscreteGuidedKernel<'_, V> {
    fn support(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<(DiscreteSequence, f64)>> {
        Ok(product_support(&self.position_kernels(t, x)?))
    }
}

/// Sample `n` sequences under discrete classifier guidance.
pub fn discrete_guidance<V: ValueModel<DiscreteSequence> + ?Sized>(
    process: &MaskedProcess,
    values: &V,
    alpha: f64,
    mode: DiscreteGuidance,
    n: usize,
    seed: u64,
) -> Result<SamplerReport<DiscreteSequence>> {
    let k = DiscreteGuidedKernel::new(process, values, alpha, mode)?;
    Ok(SamplerReport::plain(sample_with_kernel(process, &k, n, seed)?))
}
