//! Masked (absorbing-state) discrete diffusion over fixed-length token sequences.
//!
//! A clean sequence has tokens in `0..K`. The absorbing token is [`MASK`]. The
//! exact denoiser returns per-position marginals of the data law conditioned on
//! the unmasked tokens, which does not depend on `t`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::schedule::NoiseSchedule;
use super::Process;
use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;

/// Absorbing token.
pub const MASK: u8 = u8::MAX;

/// Largest number of enumerated states any table may hold.
pub const ENUMERATION_CAP: u64 = 1 << 22;

/// A token sequence, possibly containing [`MASK`] entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiscreteSequence(pub Vec<u8>);

impl DiscreteSequence {
    pub fn fully_masked(len: usize) -> Self {
        Self(vec![MASK; len])
    }

    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_clean(&self) -> bool {
        self.0.iter().all(|&v| v != MASK)
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v == MASK).map(|(i, _)| i)
    }

    /// Copy with position `pos` set to `token`.
    pub fn with_token(&self, pos: usize, token: u8) -> Self {
        let mut out = self.clone();
        out.0[pos] = token;
        out
    }

    /// Number of positions where the sequences differ.
    pub fn hamming(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// One-hot rows of width `vocab + 1`; the last column is the mask.
    pub fn onehot(&self, vocab: usize) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|&v| {
                let mut row = vec![0.0; vocab + 1];
                row[if v == MASK { vocab } else { v as usize }] = 1.0;
                row
            })
            .collect()
    }
}

impl fmt::Display for DiscreteSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &v in &self.0 {
            let c = if v == MASK { '*' } else { (b'A' + v) as char };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for DiscreteSequence {
    type Err = Error;

    /// Letters `A..Z` are tokens `0..26`; `*` is the mask.
    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '*' => Ok(MASK),
                'A'..='Z' => Ok(c as u8 - b'A'),
                _ => Err(invalid(format!("bad token `{c}` in sequence `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

/// Vocabulary size and length of a sequence space, with enumeration helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpace {
    pub vocab: usize,
    pub length: usize,
}

impl SeqSpace {
    pub fn new(vocab: usize, length: usize) -> Result<Self> {
        if vocab == 0 || vocab > 26 || length == 0 {
            return Err(invalid(format!("need 1 <= K <= 26 and L >= 1, got K = {vocab}, L = {length}")));
        }
        let states = ((vocab + 1) as u64).checked_pow(length as u32).unwrap_or(u64::MAX);
        if states > ENUMERATION_CAP {
            return Err(Error::TooLarge { states, cap: ENUMERATION_CAP });
        }
        Ok(Self { vocab, length })
    }

    /// `K^L`.
    pub fn clean_size(&self) -> usize {
        self.vocab.pow(self.length as u32)
    }

    /// `(K+1)^L`.
    pub fn full_size(&self) -> usize {
        (self.vocab + 1).pow(self.length as u32)
    }

    pub fn clean_index(&self, x: &DiscreteSequence) -> usize {
        x.0.iter().fold(0, |acc, &v| acc * self.vocab + v as usize)
    }

    pub fn clean_at(&self, mut idx: usize) -> DiscreteSequence {
        let mut out = vec![0u8; self.length];
        for slot in out.iter_mut().rev() {
            *slot = (idx % self.vocab) as u8;
            idx /= self.vocab;
        }
        DiscreteSequence(out)
    }

    /// Index in base `K+1` with the mask as digit `K`.
    pub fn full_index(&self, x: &DiscreteSequence) -> usize {
        let b = self.vocab + 1;
        x.0.iter()
            .fold(0, |acc, &v| acc * b + if v == MASK { self.vocab } else { v as usize })
    }

    pub fn full_at(&self, mut idx: usize) -> DiscreteSequence {
        let b = self.vocab + 1;
        let mut out = vec![0u8; self.length];
        for slot in out.iter_mut().rev() {
            let d = idx % b;
            *slot = if d == self.vocab { MASK } else { d as u8 };
            idx /= b;
        }
        DiscreteSequence(out)
    }

    /// All clean sequences in index order.
    pub fn clean_states(&self) -> impl Iterator<Item = DiscreteSequence> + '_ {
        (0..self.clean_size()).map(|i| self.clean_at(i))
    }

    pub fn check(&self, x: &DiscreteSequence) -> Result<()> {
        if x.len() != self.length {
            return Err(invalid(format!("sequence length {} != L = {}", x.len(), self.length)));
        }
        if x.0.iter().any(|&v| v != MASK && v as usize >= self.vocab) {
            return Err(invalid(format!("token outside vocabulary of size {}", self.vocab)));
        }
        Ok(())
    }
}

/// Backward transition of one masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProbs {
    /// Probability of remaining masked.
    pub stay: f64,
    /// Probability of unmasking to each token.
    pub unmask: Vec<f64>,
}

/// Per-position backward kernel given the current state.
#[derive(Debug, Clone, PartialEq)]
pub enum PositionKernel {
    /// Already unmasked; copied forward.
    Fixed(u8),
    Masked(StepProbs),
}

impl PositionKernel {
    /// Probability of producing `next` at this position.
    pub fn prob(&self, next: u8) -> f64 {
        match self {
            Self::Fixed(v) => f64::from(u8::from(*v == next)),
            Self::Masked(p) if next == MASK => p.stay,
            Self::Masked(p) => p.unmask.get(next as usize).copied().unwrap_or(0.0),
        }
    }

    /// Inverse-CDF draw; the mask is ordered first.
    pub fn sample(&self, rng: &mut StreamRng) -> u8 {
        match self {
            Self::Fixed(v) => *v,
            Self::Masked(p) => {
                let total = p.stay + p.unmask.iter().sum::<f64>();
                let mut u = rng.random::<f64>() * total;
                if u < p.stay {
                    return MASK;
                }
                u -= p.stay;
                let mut last = MASK;
                for (k, &w) in p.unmask.iter().enumerate() {
                    if w > 0.0 {
                        last = k as u8;
                        if u < w {
                            return k as u8;
                        }
                        u -= w;
                    }
                }
                if last == MASK && p.stay > 0.0 {
                    MASK
                } else {
                    last
                }
            }
        }
    }

    /// Outcomes with positive probability, mask first.
    pub fn outcomes(&self) -> Vec<(u8, f64)> {
        match self {
            Self::Fixed(v) => vec![(*v, 1.0)],
            Self::Masked(p) => {
                let mut out = Vec::with_capacity(p.unmask.len() + 1);
                if p.stay > 0.0 {
                    out.push((MASK, p.stay));
                }
                out.extend(
                    p.unmask.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(k, &w)| (k as u8, w)),
                );
                out
            }
        }
    }
}

/// Backward step of one masked position given the denoiser row `x0_hat`.
pub fn masked_backward_step(abar_prev: f64, abar_t: f64, x0_hat: &[f64]) -> Result<StepProbs> {
    let denom = 1.0 - abar_t;
    if denom <= 0.0 {
        return Err(invalid("1 - abar_t must be positive"));
    }
    let sum: f64 = x0_hat.iter().sum();
    if x0_hat.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(invalid("denoiser row must be a probability vector"));
    }
    let stay = (1.0 - abar_prev) / denom;
    let scale = (abar_prev - abar_t) / denom;
    Ok(StepProbs { stay, unmask: x0_hat.iter().map(|p| scale * p).collect() })
}

/// Enumerate the product of per-position kernels.
pub fn product_support(kernels: &[PositionKernel]) -> Vec<(DiscreteSequence, f64)> {
    let mut out = vec![(DiscreteSequence(Vec::with_capacity(kernels.len())), 1.0)];
    for k in kernels {
        let opts = k.outcomes();
        let mut next = Vec::with_capacity(out.len() * opts.len());
        for (seq, p) in &out {
            for &(tok, q) in &opts {
                let mut s = seq.clone();
                s.0.push(tok);
                next.push((s, p * q));
            }
        }
        out = next;
    }
    out
}

struct DenoiserMemo {
    mass: Vec<f64>,
    marg: Vec<f64>,
}

/// Pre-trained masked diffusion with the exact denoiser of a tabular data law.
pub struct MaskedProcess {
    schedule: NoiseSchedule,
    space: SeqSpace,
    data: Vec<f64>,
    memo: Option<DenoiserMemo>,
}

impl fmt::Debug for MaskedProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskedProcess")
            .field("space", &self.space)
            .field("steps", &self.schedule.steps())
            .finish()
    }
}

impl MaskedProcess {
    /// `data` holds unnormalized masses over clean sequences in index order.
    pub fn new(schedule: NoiseSchedule, space: SeqSpace, data: Vec<f64>) -> Result<Self> {
        if data.len() != space.clean_size() {
            return Err(invalid(format!(
                "data table has {} entries, expected K^L = {}",
                data.len(),
                space.clean_size()
            )));
        }
        if data.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(invalid("data masses must be finite and non-negative"));
        }
        let total: f64 = data.iter().sum();
        if total <= 0.0 {
            return Err(invalid("data table has no mass"));
        }
        let data: Vec<f64> = data.iter().map(|p| p / total).collect();
        let mut out = Self { schedule, space, data, memo: None };
        out.memo = out.build_memo();
        Ok(out)
    }

    fn build_memo(&self) -> Option<DenoiserMemo> {
        let (k, l) = (self.space.vocab, self.space.length);
        let full = self.space.full_size();
        if (full * l * k) as u64 > 8_000_000 {
            return None;
        }
        let mut mass = vec![0.0; full];
        let mut marg = vec![0.0; full * l * k];
        for (ci, &p) in self.data.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let y = self.space.clean_at(ci);
            for pattern in 0u32..(1 << l) {
                let mut s = y.clone();
                for pos in 0..l {
                    if pattern & (1 << pos) != 0 {
                        s.0[pos] = MASK;
                    }
                }
                let si = self.space.full_index(&s);
                mass[si] += p;
                for pos in 0..l {
                    if pattern & (1 << pos) != 0 {
                        marg[(si * l + pos) * k + y.0[pos] as usize] += p;
                    }
                }
            }
        }
        Some(DenoiserMemo { mass, marg })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn space(&self) -> SeqSpace {
        self.space
    }

    /// Normalized data law over clean sequences.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Exact per-position marginals `L x K` of the data law given the unmasked tokens.
    pub fn denoiser(&self, x: &DiscreteSequence) -> Result<Vec<Vec<f64>>> {
        self.space.check(x)?;
        let (k, l) = (self.space.vocab, self.space.length);
        let mut rows = vec![vec![0.0; k]; l];
        if let Some(m) = &self.memo {
            let si = self.space.full_index(x);
            let mass = m.mass[si];
            if mass <= 0.0 {
                return Err(Error::ZeroSupport);
            }
            for (pos, row) in rows.iter_mut().enumerate() {
                match x.0[pos] {
                    MASK => {
                        let base = (si * l + pos) * k;
                        for (tok, r) in row.iter_mut().enumerate() {
                            *r = m.marg[base + tok] / mass;
                        }
                    }
                    v => row[v as usize] = 1.0,
                }
            }
            return Ok(rows);
        }
        let mut mass = 0.0;
        for (ci, &p) in self.data.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let y = self.space.clean_at(ci);
            if x.0.iter().zip(&y.0).all(|(&a, &b)| a == MASK || a == b) {
                mass += p;
                for pos in 0..l {
                    rows[pos][y.0[pos] as usize] += p;
                }
            }
        }
        if mass <= 0.0 {
            return Err(Error::ZeroSupport);
        }
        for row in &mut rows {
            row.iter_mut().for_each(|r| *r /= mass);
        }
        Ok(rows)
    }

    /// Per-position backward kernels at state `x_t`.
    pub fn position_kernels(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<PositionKernel>> {
        self.check_t(t)?;
        if x.is_clean() {
            return Ok(x.0.iter().map(|&v| PositionKernel::Fixed(v)).collect());
        }
        let rows = self.denoiser(x)?;
        let (prev, cur) = (self.schedule.alpha_bar(t - 1), self.schedule.alpha_bar(t));
        x.0.iter()
            .zip(rows)
            .map(|(&v, row)| {
                if v == MASK {
                    masked_backward_step(prev, cur, &row).map(PositionKernel::Masked)
                } else {
                    Ok(PositionKernel::Fixed(v))
                }
            })
            .collect()
    }

    /// Every next state with positive pre-trained probability.
    pub fn support(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<(DiscreteSequence, f64)>> {
        Ok(product_support(&self.position_kernels(t, x)?))
    }

    /// Continuous-time rates out of the mask, one row per position.
    ///
    /// Entry `k < K` is the rate to token `k`; entry `K` is the diagonal. Rows of
    /// unmasked positions are zero.
    pub fn generator_rate(&self, t: usize, x: &DiscreteSequence) -> Result<Vec<Vec<f64>>> {
        self.check_t(t)?;
        let rows = self.denoiser(x)?;
        let (prev, cur) = (self.schedule.alpha_bar(t - 1), self.schedule.alpha_bar(t));
        let scale = (prev - cur) / ((1.0 - cur) * self.schedule.dt());
        let k = self.space.vocab;
        Ok(x.0
            .iter()
            .zip(rows)
            .map(|(&v, row)| {
                let mut out = vec![0.0; k + 1];
                if v == MASK {
                    for tok in 0..k {
                        out[tok] = scale * row[tok];
                    }
                    out[k] = -out[..k].iter().sum::<f64>();
                }
                out
            })
            .collect())
    }

    /// States reachable by unmasking at most one position with positive probability.
    pub fn single_unmask_neighbors(&self, x: &DiscreteSequence) -> Result<Vec<DiscreteSequence>> {
        let rows = self.denoiser(x)?;
        let mut out = vec![x.clone()];
        for pos in x.masked_positions() {
            for (tok, &p) in rows[pos].iter().enumerate() {
                if p > 0.0 {
                    out.push(x.with_token(pos, tok as u8));
                }
            }
        }
        Ok(out)
    }

    /// Law over clean sequences induced by running the backward chain from `t = T`.
    pub fn induced_law(&self) -> Result<Vec<f64>> {
        let mut dist = vec![0.0; self.space.full_size()];
        dist[self.space.full_index(&DiscreteSequence::fully_masked(self.space.length))] = 1.0;
        for t in (1..=self.schedule.steps()).rev() {
            let mut next = vec![0.0; dist.len()];
            for (si, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (y, q) in self.support(t, &self.space.full_at(si))? {
                    next[self.space.full_index(&y)] += p * q;
                }
            }
            dist = next;
        }
        Ok(self.space.clean_states().map(|y| dist[self.space.full_index(&y)]).collect())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.steps() {
            return Err(invalid(format!("step {t} outside 1..={}", self.schedule.steps())));
        }
        Ok(())
    }
}

impl Process for MaskedProcess {
    type State = DiscreteSequence;

    fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn sample_initial(&self, _rng: &mut StreamRng) -> DiscreteSequence {
        DiscreteSequence::fully_masked(self.space.length)
    }

    fn initial_is_deterministic(&self) -> bool {
        true
    }

    fn sample_step(&self, t: usize, x: &DiscreteSequence, rng: &mut StreamRng) -> Result<DiscreteSequence> {
        let kernels = self.position_kernels(t, x)?;
        Ok(DiscreteSequence(kernels.iter().map(|k| k.sample(rng)).collect()))
    }

    fn log_prob_step(&self, t: usize, next: &DiscreteSequence, prev: &DiscreteSequence) -> Result<f64> {
        let kernels = self.position_kernels(t, prev)?;
        Ok(kernels.iter().zip(&next.0).map(|(k, &v)| k.prob(v).ln()).sum())
    }

    fn forward_sample(&self, x0: &DiscreteSequence, t: usize, rng: &mut StreamRng) -> Result<DiscreteSequence> {
        self.space.check(x0)?;
        let keep = self.schedule.alpha_bar(t.min(self.schedule.steps()));
        Ok(DiscreteSequence(
            x0.0.iter().map(|&v| if rng.random::<f64>() < keep { v } else { MASK }).collect(),
        ))
    }
}
