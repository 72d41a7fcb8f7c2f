//! Reward models and their gradients.
//!
//! Continuous kinds act on `R^d`, tables act on clean sequences and the
//! Frobenius kind acts on rotations.

use nalgebra::Matrix3;

use crate::error::{invalid, Error, Result};
use crate::geometry_so3::RotationState;
use crate::processes::{ContinuousState, DiscreteSequence, SeqSpace};

/// Kind of state a reward accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Continuous,
    Discrete,
    Rotation,
}

/// Borrowed view of any state kind.
#[derive(Debug, Clone, Copy)]
pub enum StateRef<'a> {
    Continuous(&'a [f64]),
    Discrete(&'a DiscreteSequence),
    Rotation(&'a RotationState),
}

impl StateRef<'_> {
    pub fn kind(&self) -> StateKind {
        match self {
            Self::Continuous(_) => StateKind::Continuous,
            Self::Discrete(_) => StateKind::Discrete,
            Self::Rotation(_) => StateKind::Rotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// `<coef, x> + offset`.
    Linear { coef: Vec<f64>, offset: f64 },
    /// `-scale * |x - center|^2`.
    Quadratic { center: Vec<f64>, scale: f64 },
    /// Lookup over clean sequences in index order.
    Table { space: SeqSpace, values: Vec<f64> },
    /// `tr(target^T R)`.
    Frobenius { target: Matrix3<f64> },
    /// Weighted sum of rewards of one kind.
    Composite(Vec<(f64, RewardModel)>),
}

impl RewardModel {
    /// Table reward from explicit entries; unlisted sequences get `default`.
    pub fn table(space: SeqSpace, entries: &[(DiscreteSequence, f64)], default: f64) -> Result<Self> {
        let mut values = vec![default; space.clean_size()];
        for (y, r) in entries {
            space.check(y)?;
            if !y.is_clean() {
                return Err(invalid(format!("reward entry `{y}` contains a mask")));
            }
            values[space.clean_index(y)] = *r;
        }
        Ok(Self::Table { space, values })
    }

    pub fn composite(parts: Vec<(f64, RewardModel)>) -> Result<Self> {
        let kind = parts.first().map(|(_, r)| r.kind()).ok_or_else(|| invalid("empty composite reward"))?;
        if parts.iter().any(|(_, r)| r.kind() != kind) {
            return Err(invalid("composite reward mixes state kinds"));
        }
        Ok(Self::Composite(parts))
    }

    pub fn kind(&self) -> StateKind {
        match self {
            Self::Linear { .. } | Self::Quadratic { .. } => StateKind::Continuous,
            Self::Table { .. } => StateKind::Discrete,
            Self::Frobenius { .. } => StateKind::Rotation,
            Self::Composite(parts) => parts[0].1.kind(),
        }
    }

    /// Checked evaluation.
    pub fn eval(&self, x: StateRef<'_>) -> Result<f64> {
        if x.kind() != self.kind() {
            return Err(invalid(format!("{:?} reward cannot score a {:?} state", self.kind(), x.kind())));
        }
        match (self, x) {
            (Self::Linear { coef, offset }, StateRef::Continuous(v)) => {
                check_dim(coef.len(), v.len())?;
                Ok(coef.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + offset)
            }
            (Self::Quadratic { center, scale }, StateRef::Continuous(v)) => {
                check_dim(center.len(), v.len())?;
                Ok(-scale * center.iter().zip(v).map(|(c, b)| (b - c) * (b - c)).sum::<f64>())
            }
            (Self::Table { space, values }, StateRef::Discrete(y)) => {
                space.check(y)?;
                if !y.is_clean() {
                    return Err(invalid(format!("table reward needs a clean sequence, got `{y}`")));
                }
                Ok(values[space.clean_index(y)])
            }
            (Self::Frobenius { target }, StateRef::Rotation(r)) => Ok((target.transpose() * r.0).trace()),
            (Self::Composite(parts), x) => parts.iter().map(|(w, r)| r.eval(x).map(|v| w * v)).sum(),
            _ => unreachable!("kinds checked above"),
        }
    }

    /// Smallest and largest table entries.
    pub fn table_range(&self) -> Option<(f64, f64)> {
        match self {
            Self::Table { values, .. } => Some(values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })),
            _ => None,
        }
    }

    /// Multilinear extension of a sequence reward at per-position laws `probs` (`L x K`).
    pub fn multilinear_value(&self, probs: &[Vec<f64>]) -> Result<f64> {
        match self {
            Self::Table { space, values } => {
                check_probs(space, probs)?;
                Ok(multilinear(space, values, probs))
            }
            Self::Composite(parts) => parts.iter().map(|(w, r)| r.multilinear_value(probs).map(|v| w * v)).sum(),
            _ => Err(invalid("multilinear extension needs a sequence reward")),
        }
    }

    /// Partial derivatives of the multilinear extension, `L x K`.
    pub fn multilinear_partials(&self, probs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Table { space, values } => {
                check_probs(space, probs)?;
                Ok((0..space.length)
                    .map(|pos| {
                        (0..space.vocab)
                            .map(|k| {
                                let mut pinned = probs.to_vec();
                                pinned[pos] = vec![0.0; space.vocab];
                                pinned[pos][k] = 1.0;
                                multilinear(space, values, &pinned)
                            })
                            .collect()
                    })
                    .collect())
            }
            Self::Composite(parts) => {
                let mut out: Option<Vec<Vec<f64>>> = None;
                for (w, r) in parts {
                    let g = r.multilinear_partials(probs)?;
                    match &mut out {
                        None => out = Some(g.into_iter().map(|row| row.into_iter().map(|v| w * v).collect()).collect()),
                        Some(acc) => acc.iter_mut().flatten().zip(g.into_iter().flatten()).for_each(|(a, v)| *a += w * v),
                    }
                }
                Ok(out.unwrap_or_default())
            }
            _ => Err(invalid("multilinear extension needs a sequence reward")),
        }
    }
}

fn check_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid(format!("reward dimension {a} != state dimension {b}")));
    }
    Ok(())
}

fn check_probs(space: &SeqSpace, probs: &[Vec<f64>]) -> Result<()> {
    if probs.len() != space.length || probs.iter().any(|row| row.len() != space.vocab) {
        return Err(invalid("relaxed state must be L x K"));
    }
    Ok(())
}

fn multilinear(space: &SeqSpace, values: &[f64], probs: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, &r) in values.iter().enumerate() {
        let y = space.clean_at(i);
        let w: f64 = y.0.iter().enumerate().map(|(pos, &k)| probs[pos][k as usize]).product();
        total += w * r;
    }
    total
}

/// A reward usable by samplers on states of type `S`.
///
/// `reward` panics when the model cannot score `S`; [`RewardModel::eval`] is the
/// checked form.
pub trait Reward<S>: Send + Sync {
    type Grad;

    fn reward(&self, x: &S) -> f64;

    fn gradient(&self, _x: &S) -> Result<Self::Grad> {
        Err(Error::NotDifferentiable("reward has no gradient".into()))
    }
}

impl Reward<ContinuousState> for RewardModel {
    type Grad = Vec<f64>;

    fn reward(&self, x: &ContinuousState) -> f64 {
        self.eval(StateRef::Continuous(x)).unwrap_or_else(|e| panic!("{e}"))
    }

    fn gradient(&self, x: &ContinuousState) -> Result<Vec<f64>> {
        match self {
            Self::Linear { coef, .. } => {
                check_dim(coef.len(), x.len())?;
                Ok(coef.clone())
            }
            Self::Quadratic { center, scale } => {
                check_dim(center.len(), x.len())?;
                Ok(center.iter().zip(x).map(|(c, v)| -2.0 * scale * (v - c)).collect())
            }
            Self::Composite(parts) => {
                let mut out = vec![0.0; x.len()];
                for (w, r) in parts {
                    for (o, g) in out.iter_mut().zip(Reward::<ContinuousState>::gradient(r, x)?) {
                        *o += w * g;
                    }
                }
                Ok(out)
            }
            _ => Err(invalid(format!("{:?} reward cannot score a continuous state", self.kind()))),
        }
    }
}

impl Reward<DiscreteSequence> for RewardModel {
    /// Multilinear partials at the one-hot embedding.
    type Grad = Vec<Vec<f64>>;

    fn reward(&self, x: &DiscreteSequence) -> f64 {
        self.eval(StateRef::Discrete(x)).unwrap_or_else(|e| panic!("{e}"))
    }

    fn gradient(&self, x: &DiscreteSequence) -> Result<Vec<Vec<f64>>> {
        if !x.is_clean() {
            return Err(invalid("reward gradient needs a clean sequence"));
        }
        let vocab = match self {
            Self::Table { space, .. } => space.vocab,
            Self::Composite(parts) => match &parts[0].1 {
                Self::Table { space, .. } => space.vocab,
                _ => return Err(invalid("not a sequence reward")),
            },
            _ => return Err(invalid("not a sequence reward")),
        };
        let probs: Vec<Vec<f64>> = x.onehot(vocab).into_iter().map(|mut r| {
            r.pop();
            r
        }).collect();
        self.multilinear_partials(&probs)
    }
}

impl Reward<RotationState> for RewardModel {
    /// Ambient Euclidean gradient.
    type Grad = Matrix3<f64>;

    fn reward(&self, x: &RotationState) -> f64 {
        self.eval(StateRef::Rotation(x)).unwrap_or_else(|e| panic!("{e}"))
    }

    fn gradient(&self, x: &RotationState) -> Result<Matrix3<f64>> {
        match self {
            Self::Frobenius { target } => Ok(*target),
            Self::Composite(parts) => parts.iter().try_fold(Matrix3::zeros(), |acc, (w, r)| {
                Reward::<RotationState>::gradient(r, x).map(|g| acc + g * *w)
            }),
            _ => Err(invalid(format!("{:?} reward cannot score a rotation", self.kind()))),
        }
    }
}
