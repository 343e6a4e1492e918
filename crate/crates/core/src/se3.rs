//! Rigid transforms and their exponential-coordinate parameterization.
//!
//! Poses are camera-to-world. Pose updates are always applied by left
//! multiplication, `exp([S]θ) · T₀`, so a pure rotation update spins the
//! camera about the world origin rather than about its own center.
//!
//! Exponential coordinates are stored as `[ωθ | νθ]`: rotation part first.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("non-finite exponential coordinates")]
    NonFinite,
    #[error("rotation angle {angle} is within 1e-6 of pi; logarithm branch is ambiguous")]
    AmbiguousBranch { angle: f64 },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Tolerance for the orthonormality checks, widened for `f32`.
fn pose_tolerance<T: Real>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(100.0))
}

/// Rigid transform `x ↦ R x + t`, camera-to-world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zero() }
    }

    /// Builds a pose, checking `RᵀR = I` and `det R = +1`.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self, Se3Error> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vec3<T>) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    pub fn validate(&self) -> Result<(), Se3Error> {
        if !self.rotation.is_finite() || !self.translation.is_finite() {
            return Err(Se3Error::InvalidPose("non-finite entries".into()));
        }
        let tol = pose_tolerance::<T>();
        let gram = self.rotation.transpose() * self.rotation;
        let ortho = gram.max_abs_diff(&Mat3::identity());
        if ortho > tol {
            return Err(Se3Error::InvalidPose(format!("rotation not orthonormal (|RᵀR - I| = {ortho})")));
        }
        let det = self.rotation.determinant();
        if (det - T::one()).abs() > tol {
            return Err(Se3Error::InvalidPose(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// `self ∘ other`, i.e. the matrix product `self · other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation.mul_vec(other.translation) + self.translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.mul_vec(self.translation) }
    }

    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Homogeneous 4×4 matrix, row-major.
    pub fn to_matrix(&self) -> [[T; 4]; 4] {
        let (r, t) = (&self.rotation.m, self.translation);
        let (z, o) = (T::zero(), T::one());
        [[r[0][0], r[0][1], r[0][2], t.x], [r[1][0], r[1][1], r[1][2], t.y], [r[2][0], r[2][1], r[2][2], t.z], [z, z, z, o]]
    }

    /// Reads a homogeneous 4×4 row-major matrix.
    ///
    /// Rotation blocks within 1e-5 of orthonormal (typical of text-serialized
    /// datasets) are projected back onto SO(3); anything worse is rejected.
    pub fn from_matrix(m: &[[T; 4]; 4]) -> Result<Self, Se3Error> {
        let rotation = Mat3::from_rows([[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]]);
        let translation = Vec3::new(m[0][3], m[1][3], m[2][3]);
        if !rotation.is_finite() || !translation.is_finite() {
            return Err(Se3Error::InvalidPose("non-finite entries".into()));
        }
        let drift = (rotation.transpose() * rotation).max_abs_diff(&Mat3::identity());
        if drift > T::lit(1e-5) || rotation.determinant() <= T::zero() {
            return Err(Se3Error::InvalidPose(format!("rotation block is not a rotation (|RᵀR - I| = {drift})")));
        }
        Self::new(orthonormalize(rotation), translation)
    }

    pub fn camera_center(&self) -> Vec3<T> {
        self.translation
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose { rotation: self.rotation.cast(), translation: self.translation.cast() }
    }
}

/// Newton–Schulz iteration towards the nearest rotation; converges quadratically
/// for nearly orthonormal input.
fn orthonormalize<T: Real>(mut r: Mat3<T>) -> Mat3<T> {
    let half = T::lit(0.5);
    for _ in 0..6 {
        let gram = r.transpose() * r;
        r = r * (Mat3::diagonal(T::lit(1.5)) - gram.scale(half));
    }
    r
}

impl<T: Real> Serialize for Pose<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let m = self.to_matrix().map(|row| row.map(|v| v.to_f64_lossy()));
        m.serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for Pose<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = <[[f64; 4]; 4]>::deserialize(d)?;
        Pose::from_matrix(&m.map(|row| row.map(T::lit))).map_err(serde::de::Error::custom)
    }
}

/// Exponential coordinates `Sθ = [ωθ | νθ]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpCoords<T>(pub [T; 6]);

impl<T: Real> ExpCoords<T> {
    pub fn zero() -> Self {
        Self([T::zero(); 6])
    }

    pub fn from_parts(rotation: Vec3<T>, translation: Vec3<T>) -> Self {
        Self([rotation.x, rotation.y, rotation.z, translation.x, translation.y, translation.z])
    }

    /// `ωθ`, the rotation vector.
    pub fn rotation(&self) -> Vec3<T> {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    /// `νθ`.
    pub fn translation(&self) -> Vec3<T> {
        Vec3::new(self.0[3], self.0[4], self.0[5])
    }

    /// Rotation magnitude θ = ‖ωθ‖.
    pub fn angle(&self) -> T {
        self.rotation().norm()
    }

    /// Splits into unit screw axis `(ω, ν)` and magnitude θ.
    ///
    /// For θ = 0 the pure-translation convention applies: ω = 0, θ = ‖νθ‖ and
    /// ν the unit translation direction (or zero for the identity).
    pub fn screw_axis(&self) -> (Vec3<T>, Vec3<T>, T) {
        let theta = self.angle();
        if theta > T::zero() {
            let inv = T::one() / theta;
            (self.rotation() * inv, self.translation() * inv, theta)
        } else {
            let mag = self.translation().norm();
            if mag > T::zero() {
                (Vec3::zero(), self.translation() * (T::one() / mag), mag)
            } else {
                (Vec3::zero(), Vec3::zero(), T::zero())
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn neg(&self) -> Self {
        Self(self.0.map(|v| -v))
    }

    pub fn max_abs_diff(&self, o: &Self) -> T {
        self.0.iter().zip(o.0.iter()).fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
    }

    pub fn cast<U: Real>(&self) -> ExpCoords<U> {
        ExpCoords(self.0.map(|v| v.cast()))
    }
}

/// Below `θ² < ∛ε` every trigonometric coefficient switches to its Taylor series
/// through θ⁴.
#[inline]
fn small_angle<T: Real>(theta2: T) -> bool {
    theta2 < T::epsilon().cbrt()
}

/// `(sin θ/θ, (1 − cos θ)/θ², (θ − sin θ)/θ³)`.
fn so3_coefficients<T: Real>(theta2: T) -> (T, T, T) {
    if small_angle(theta2) {
        let t4 = theta2 * theta2;
        (
            T::one() - theta2 / T::lit(6.0) + t4 / T::lit(120.0),
            T::lit(0.5) - theta2 / T::lit(24.0) + t4 / T::lit(720.0),
            T::lit(1.0 / 6.0) - theta2 / T::lit(120.0) + t4 / T::lit(5040.0),
        )
    } else {
        let theta = theta2.sqrt();
        let s = theta.sin();
        // 1 − cos θ = 2 sin²(θ/2) avoids cancellation
        let h = (theta * T::lit(0.5)).sin();
        (s / theta, T::lit(2.0) * h * h / theta2, (theta - s) / (theta2 * theta))
    }
}

/// Rodrigues exponential of a rotation vector.
pub fn exp_so3<T: Real>(phi: Vec3<T>) -> Mat3<T> {
    let (a, b, _) = so3_coefficients(phi.norm_squared());
    let k = Mat3::skew(phi);
    Mat3::identity() + k.scale(a) + (k * k).scale(b)
}

/// SO(3) left Jacobian `V(φ) = I + (1 − cos θ)/θ² [φ] + (θ − sin θ)/θ³ [φ]²`.
///
/// Applied to `νθ` this is exactly `K(S, θ) = (Iθ + (1 − cos θ)[ω] + (θ − sin θ)[ω]²) ν`.
pub fn so3_left_jacobian<T: Real>(phi: Vec3<T>) -> Mat3<T> {
    let (_, b, c) = so3_coefficients(phi.norm_squared());
    let k = Mat3::skew(phi);
    Mat3::identity() + k.scale(b) + (k * k).scale(c)
}

fn so3_left_jacobian_inverse<T: Real>(phi: Vec3<T>) -> Mat3<T> {
    let theta2 = phi.norm_squared();
    // (1 − (θ/2) cot(θ/2)) / θ²
    let e = if small_angle(theta2) {
        T::lit(1.0 / 12.0) + theta2 / T::lit(720.0) + theta2 * theta2 / T::lit(30240.0)
    } else {
        let half = theta2.sqrt() * T::lit(0.5);
        let (s, c) = half.sin_cos();
        (T::one() - half * c / s) / theta2
    };
    let k = Mat3::skew(phi);
    Mat3::identity() - k.scale(T::lit(0.5)) + (k * k).scale(e)
}

/// `e^{[S]θ}` as a pose: rotation `e^{[ω]θ}`, translation `K(S, θ)`.
pub fn exp_se3<T: Real>(coords: &ExpCoords<T>) -> Result<Pose<T>, Se3Error> {
    if !coords.is_finite() {
        return Err(Se3Error::NonFinite);
    }
    let phi = coords.rotation();
    let rho = coords.translation();
    let (a, b, c) = so3_coefficients(phi.norm_squared());
    let k = Mat3::skew(phi);
    let k2 = k * k;
    let rotation = Mat3::identity() + k.scale(a) + k2.scale(b);
    let v = Mat3::identity() + k.scale(b) + k2.scale(c);
    Ok(Pose { rotation, translation: v.mul_vec(rho) })
}

/// Principal-branch logarithm; rejects rotations within 1e-6 of π.
pub fn log_se3<T: Real>(pose: &Pose<T>) -> Result<ExpCoords<T>, Se3Error> {
    pose.validate()?;
    let r = &pose.rotation.m;
    let w = Vec3::new(r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]);
    let half = T::lit(0.5);
    let sin_theta = w.norm() * half;
    let cos_theta = (pose.rotation.trace() - T::one()) * half;
    let theta = sin_theta.atan2(cos_theta);
    if T::PI() - theta < T::lit(1e-6) {
        return Err(Se3Error::AmbiguousBranch { angle: theta.to_f64_lossy() });
    }
    let theta2 = theta * theta;
    // θ / (2 sin θ)
    let scale = if small_angle(theta2) {
        half * (T::one() + theta2 / T::lit(6.0) + T::lit(7.0) * theta2 * theta2 / T::lit(360.0))
    } else {
        theta / (T::lit(2.0) * sin_theta)
    };
    let phi = w * scale;
    let rho = so3_left_jacobian_inverse(phi).mul_vec(pose.translation);
    Ok(ExpCoords::from_parts(phi, rho))
}

/// Coefficient matrix `Q(φ, ρ)` of the SE(3) left Jacobian.
fn se3_q_block<T: Real>(phi: Vec3<T>, rho: Vec3<T>) -> Mat3<T> {
    let theta2 = phi.norm_squared();
    let (c1, c2, c3) = if small_angle(theta2) {
        let t4 = theta2 * theta2;
        (
            T::lit(1.0 / 6.0) - theta2 / T::lit(120.0) + t4 / T::lit(5040.0),
            T::lit(1.0 / 24.0) - theta2 / T::lit(720.0) + t4 / T::lit(40320.0),
            T::lit(1.0 / 120.0) - theta2 / T::lit(2520.0) + t4 / T::lit(120960.0),
        )
    } else {
        let theta = theta2.sqrt();
        let (s, c) = theta.sin_cos();
        let two = T::lit(2.0);
        (
            (theta - s) / (theta2 * theta),
            (theta2 + two * c - two) / (two * theta2 * theta2),
            (two * theta - T::lit(3.0) * s + theta * c) / (two * theta2 * theta2 * theta),
        )
    };
    let p = Mat3::skew(phi);
    let r = Mat3::skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let ppr = p * pr;
    let rpp = rp * p;
    r.scale(T::lit(0.5)) + (pr + rp + prp).scale(c1) + (ppr + rpp - prp.scale(T::lit(3.0))).scale(c2) + (prp * p + ppr * p).scale(c3)
}

/// SE(3) left Jacobian in `[ω | ν]` ordering:
/// `exp(ξ + δ) ≈ exp(J_l(ξ) δ) · exp(ξ)`, with `J_l = [[J, 0], [Q, J]]`.
pub fn se3_left_jacobian<T: Real>(coords: &ExpCoords<T>) -> [[T; 6]; 6] {
    let phi = coords.rotation();
    let j = so3_left_jacobian(phi);
    let q = se3_q_block(phi, coords.translation());
    let mut out = [[T::zero(); 6]; 6];
    for i in 0..3 {
        for k in 0..3 {
            out[i][k] = j.m[i][k];
            out[i + 3][k] = q.m[i][k];
            out[i + 3][k + 3] = j.m[i][k];
        }
    }
    out
}

/// Pulls a gradient w.r.t. a left perturbation `ε` of `exp(ξ) T₀` back onto `ξ`:
/// returns `J_l(ξ)ᵀ g`.
pub fn pullback_left_gradient<T: Real>(coords: &ExpCoords<T>, g_eps: &[T; 6]) -> [T; 6] {
    let jl = se3_left_jacobian(coords);
    let mut out = [T::zero(); 6];
    for (i, o) in out.iter_mut().enumerate() {
        for (row, g) in jl.iter().zip(g_eps.iter()) {
            *o += row[i] * *g;
        }
    }
    out
}

/// Rotation and translation discrepancy between two poses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Geodesic rotation angle, degrees.
    pub rotation_deg: f64,
    /// Camera center distance, scene units.
    pub translation: f64,
}

impl PoseError {
    pub fn within(&self, rot_deg: f64, trans: f64) -> bool {
        self.rotation_deg < rot_deg && self.translation < trans
    }
}

/// `arccos((tr(RₐᵀR_b) − 1)/2)` in degrees and `‖tₐ − t_b‖`.
pub fn pose_errors<T: Real>(a: &Pose<T>, b: &Pose<T>) -> PoseError {
    // tr(AᵀB) = Σ a_ki b_ki; evaluated in this fixed order so swapping a and b
    // produces the identical sum.
    let mut trace = 0.0f64;
    for i in 0..3 {
        for k in 0..3 {
            trace += a.rotation.m[k][i].to_f64_lossy() * b.rotation.m[k][i].to_f64_lossy();
        }
    }
    let cos = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let d = a.translation.cast::<f64>() - b.translation.cast::<f64>();
    PoseError { rotation_deg: cos.acos().to_degrees(), translation: d.norm() }
}

/// Uniform random unit vector.
pub fn random_unit_vector<T: Real, R: Rng + ?Sized>(rng: &mut R) -> Vec3<T> {
    loop {
        let v: Vec3<f64> = Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return (v * (1.0 / n)).cast();
        }
    }
}

/// Rotates the camera about a uniformly random axis by an angle drawn from
/// `Uniform[−rot_limit, rot_limit]` degrees (`R' = R_axis R`), then offsets each
/// translation component by `Uniform[−trans_limit, trans_limit]`.
pub fn perturb_pose<T: Real, R: Rng + ?Sized>(pose: &Pose<T>, rot_limit_deg: f64, trans_limit: f64, rng: &mut R) -> Pose<T> {
    let axis: Vec3<T> = random_unit_vector(rng);
    let angle = rng.random_range(-rot_limit_deg..=rot_limit_deg).to_radians();
    let offset = Vec3::new(
        rng.random_range(-trans_limit..=trans_limit),
        rng.random_range(-trans_limit..=trans_limit),
        rng.random_range(-trans_limit..=trans_limit),
    );
    Pose { rotation: exp_so3(axis * T::lit(angle)) * pose.rotation, translation: pose.translation + offset.cast() }
}

/// Camera at `eye` looking at `target`, NeRF-synthetic convention (camera looks
/// down its local −z, local +y up).
pub fn look_at<T: Real>(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Result<Pose<T>, Se3Error> {
    let back = (eye - target).normalize();
    let right = up.cross(back);
    if right.norm() < T::lit(1e-6) {
        return Err(Se3Error::InvalidPose("look_at: up vector parallel to view direction".into()));
    }
    let right = right.normalize();
    let true_up = back.cross(right);
    let rotation = Mat3::from_rows([[right.x, true_up.x, back.x], [right.y, true_up.y, back.y], [right.z, true_up.z, back.z]]);
    Pose::new(rotation, eye)
}
