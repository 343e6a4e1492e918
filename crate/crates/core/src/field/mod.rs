//! Radiance fields `(σ, c) = F(x, d)`.
//!
//! Two implementations share the [`RadianceField`] trait: [`AnalyticScene`],
//! a closed-form smooth density used as a test oracle and toy target, and
//! [`MlpField`], a trainable positional-encoded MLP with hand-written reverse
//! mode. Density never depends on the view direction.

mod analytic;
mod encoding;
mod mlp;

pub use analytic::{AnalyticScene, Primitive, Shape};
pub use encoding::{encode_with_raw, positional_encoding};
pub use mlp::{MlpArchitecture, MlpField, MlpScratch};

use thiserror::Error;

use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("view direction must be unit length (|d| = {norm})")]
    NonUnitDirection { norm: f64 },
    #[error("malformed field file: {0}")]
    Format(String),
    #[error("field file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Density (1/length, ≥ 0) and RGB color in [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldOutput<T> {
    pub density: T,
    pub color: Vec3<T>,
}

/// Field output plus input Jacobians. `d_color_dx[c][k] = ∂c_c/∂x_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldGrads<T> {
    pub output: FieldOutput<T>,
    pub d_density_dx: Vec3<T>,
    pub d_color_dx: Mat3<T>,
    pub d_color_dd: Mat3<T>,
}

/// A differentiable radiance field.
///
/// `eval*` methods trust their inputs; use [`query`] / [`query_with_grads`] for
/// validated access. Implementations must be read-only so renders can share a
/// field across threads.
pub trait RadianceField<T: Real>: Send + Sync {
    fn eval(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T>;

    /// Must return exactly the output of [`RadianceField::eval`] alongside the Jacobians.
    fn eval_with_grads(&self, x: Vec3<T>, d: Vec3<T>) -> FieldGrads<T>;

    /// Evaluates every sample of one ray.
    fn eval_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, out: &mut [FieldOutput<T>]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = self.eval(x, d);
        }
    }

    /// Vector–Jacobian products for one ray's samples.
    ///
    /// `upstream[i] = (∂L/∂σᵢ, ∂L/∂cᵢ)`. Writes `∂L/∂xᵢ` into `dx[i]` and
    /// returns `Σᵢ ∂L/∂d` through the color head.
    fn backprop_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, upstream: &[(T, Vec3<T>)], dx: &mut [Vec3<T>]) -> Vec3<T> {
        let mut dd = Vec3::zero();
        for ((&x, &(gs, gc)), out) in xs.iter().zip(upstream).zip(dx.iter_mut()) {
            if gs == T::zero() && gc == Vec3::zero() {
                *out = Vec3::zero();
                continue;
            }
            let g = self.eval_with_grads(x, d);
            *out = g.d_density_dx * gs + g.d_color_dx.tr_mul_vec(gc);
            dd += g.d_color_dd.tr_mul_vec(gc);
        }
        dd
    }
}

impl<T: Real, F: RadianceField<T> + ?Sized> RadianceField<T> for &F {
    fn eval(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T> {
        (**self).eval(x, d)
    }
    fn eval_with_grads(&self, x: Vec3<T>, d: Vec3<T>) -> FieldGrads<T> {
        (**self).eval_with_grads(x, d)
    }
    fn eval_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, out: &mut [FieldOutput<T>]) {
        (**self).eval_samples(xs, d, out)
    }
    fn backprop_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, upstream: &[(T, Vec3<T>)], dx: &mut [Vec3<T>]) -> Vec3<T> {
        (**self).backprop_samples(xs, d, upstream, dx)
    }
}

impl<T: Real, F: RadianceField<T> + ?Sized> RadianceField<T> for std::sync::Arc<F> {
    fn eval(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T> {
        (**self).eval(x, d)
    }
    fn eval_with_grads(&self, x: Vec3<T>, d: Vec3<T>) -> FieldGrads<T> {
        (**self).eval_with_grads(x, d)
    }
    fn eval_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, out: &mut [FieldOutput<T>]) {
        (**self).eval_samples(xs, d, out)
    }
    fn backprop_samples(&self, xs: &[Vec3<T>], d: Vec3<T>, upstream: &[(T, Vec3<T>)], dx: &mut [Vec3<T>]) -> Vec3<T> {
        (**self).backprop_samples(xs, d, upstream, dx)
    }
}

fn check_direction<T: Real>(d: Vec3<T>) -> Result<(), FieldError> {
    let norm = d.norm();
    if (norm - T::one()).abs() <= T::lit(1e-6) {
        Ok(())
    } else {
        Err(FieldError::NonUnitDirection { norm: norm.to_f64_lossy() })
    }
}

pub fn query<T: Real, F: RadianceField<T> + ?Sized>(field: &F, x: Vec3<T>, d: Vec3<T>) -> Result<FieldOutput<T>, FieldError> {
    check_direction(d)?;
    Ok(field.eval(x, d))
}

pub fn query_with_grads<T: Real, F: RadianceField<T> + ?Sized>(field: &F, x: Vec3<T>, d: Vec3<T>) -> Result<FieldGrads<T>, FieldError> {
    check_direction(d)?;
    Ok(field.eval_with_grads(x, d))
}
