//! Rotation-group primitives: exponential and logarithm maps, Riemannian
//! gradients and tangent noise.
//!
//! Tangent vectors are stored as body-frame coordinates `v`, standing for the
//! tangent element `R [v]x` at `R`. The metric is the Frobenius inner product of
//! those matrices, which is `2 <v, w>` in coordinates.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Tangent coordinates in the body frame.
pub type TangentVector = Vector3<f64>;

/// Angle tolerance below which the series forms are used.
pub const SMALL_ANGLE: f64 = 1e-6;
/// Distance from pi inside which the logarithm is refused.
pub const BRANCH_TOL: f64 = 1e-6;

/// A point on SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationState(pub Matrix3<f64>);

impl RotationState {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    /// Geodesic angle between two rotations.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let c = ((self.0.transpose() * other.0).trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }
}

/// Skew matrix `[v]x`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues formula for `exp([v]x)`.
pub fn exp_at_identity(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let k = hat(v);
    let k2 = k * k;
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + k * a + k2 * b
}

/// Move from `x` along body-frame tangent `v`: `x exp([v]x)`.
pub fn so3_exp(x: &RotationState, v: &TangentVector) -> RotationState {
    RotationState(x.0 * exp_at_identity(v))
}

/// Principal logarithm of a rotation matrix.
pub fn log_at_identity(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = c.acos();
    if theta >= std::f64::consts::PI - BRANCH_TOL {
        return Err(Error::BranchCut { angle: theta });
    }
    let w = vee(r);
    if theta < SMALL_ANGLE {
        return Ok(w * (1.0 + theta * theta / 6.0));
    }
    Ok(w * (theta / theta.sin()))
}

/// Body-frame tangent at `x` whose exponential reaches `y`.
pub fn so3_log(x: &RotationState, y: &RotationState) -> Result<TangentVector> {
    log_at_identity(&(x.0.transpose() * y.0))
}

/// Riemannian gradient at `x` from the ambient Euclidean gradient `g`.
///
/// Pulls `g` into the body frame and keeps its skew part.
pub fn riemannian_grad(x: &RotationState, g: &Matrix3<f64>) -> TangentVector {
    let body = x.0.transpose() * g;
    vee(&(0.5 * (body - body.transpose())))
}

/// Metric inner product of two body-frame tangents.
pub fn tangent_inner(a: &TangentVector, b: &TangentVector) -> f64 {
    2.0 * a.dot(b)
}

/// Standard normal tangent coordinates.
pub fn tangent_noise(rng: &mut StreamRng) -> TangentVector {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn uniform_rotation(rng: &mut StreamRng) -> RotationState {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            continue;
        }
        let [w, x, y, z] = q.map(|v| v / n);
        return RotationState(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ));
    }
}
