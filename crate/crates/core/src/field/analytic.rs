use serde::{Deserialize, Serialize};

use super::{FieldGrads, FieldOutput, RadianceField};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

/// Weight added to every primitive when blending colors, so the color stays
/// smooth (and equal to the mean albedo) where all densities vanish.
const COLOR_BLEND_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape<T> {
    Sphere {
        radius: T,
    },
    /// Axis-aligned box. Infinite half extents give slabs and half-spaces.
    Box {
        half_extents: Vec3<T>,
    },
}

/// One smooth blob of constant albedo.
///
/// Density is `peak_density · (1 − smoothstep)` across a shell of width
/// `shell_width` centered on the primitive surface, which makes it C¹.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive<T> {
    pub shape: Shape<T>,
    pub center: Vec3<T>,
    pub shell_width: T,
    pub peak_density: T,
    pub albedo: Vec3<T>,
}

/// Closed-form radiance field made of [`Primitive`]s.
///
/// Colors blend by density. `view_tint ∈ [0, 1]` darkens the color by
/// `1 − view_tint·(1 − d_z)/2`, a mild view-dependent term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene<T> {
    pub primitives: Vec<Primitive<T>>,
    #[serde(default)]
    pub view_tint: T,
}

/// `(1 − S(u), d/ds)` with `u = (s + w/2)/w` clamped to [0, 1].
#[inline]
fn falloff<T: Real>(s: T, width: T) -> (T, T) {
    let u = (s / width + T::lit(0.5)).max(T::zero()).min(T::one());
    let smooth = u * u * (T::lit(3.0) - T::lit(2.0) * u);
    let slope = T::lit(6.0) * u * (T::one() - u) / width;
    (T::one() - smooth, -slope)
}

impl<T: Real> Primitive<T> {
    /// Squared radius outside of which the density is exactly zero.
    fn support_radius2(&self) -> T {
        let pad = self.shell_width * T::lit(0.5);
        let r = match &self.shape {
            Shape::Sphere { radius } => *radius + pad,
            Shape::Box { half_extents } => (*half_extents + Vec3::new(pad, pad, pad)).norm(),
        };
        r * r
    }

    /// Density and its spatial gradient.
    #[inline]
    fn density(&self, x: Vec3<T>, with_grad: bool) -> (T, Vec3<T>) {
        let rel = x - self.center;
        let r2 = self.support_radius2();
        if rel.norm_squared() >= r2 {
            return (T::zero(), Vec3::zero());
        }
        match &self.shape {
            Shape::Sphere { radius } => {
                let dist = rel.norm();
                let (h, dh) = falloff(dist - *radius, self.shell_width);
                let grad =
                    if with_grad && dh != T::zero() && dist > T::zero() { rel * (self.peak_density * dh / dist) } else { Vec3::zero() };
                (self.peak_density * h, grad)
            }
            Shape::Box { half_extents } => {
                let mut h = [T::zero(); 3];
                let mut dh = [T::zero(); 3];
                for k in 0..3 {
                    let (v, dv) = falloff(rel[k].abs() - half_extents[k], self.shell_width);
                    h[k] = v;
                    dh[k] = if rel[k] < T::zero() { -dv } else { dv };
                }
                let value = self.peak_density * h[0] * h[1] * h[2];
                let grad = if with_grad {
                    Vec3::new(dh[0] * h[1] * h[2], h[0] * dh[1] * h[2], h[0] * h[1] * dh[2]) * self.peak_density
                } else {
                    Vec3::zero()
                };
                (value, grad)
            }
        }
    }
}

impl<T: Real> AnalyticScene<T> {
    pub fn new(primitives: Vec<Primitive<T>>) -> Self {
        Self { primitives, view_tint: T::zero() }
    }

    pub fn with_view_tint(mut self, tint: T) -> Self {
        self.view_tint = tint;
        self
    }

    pub fn single_sphere(center: Vec3<T>, radius: T, shell_width: T, peak_density: T, albedo: Vec3<T>) -> Self {
        Self::new(vec![Primitive { shape: Shape::Sphere { radius }, center, shell_width, peak_density, albedo }])
    }

    /// Density `σ` everywhere with color `albedo`.
    pub fn constant(density: T, albedo: Vec3<T>) -> Self {
        let inf = T::infinity();
        Self::new(vec![Primitive {
            shape: Shape::Box { half_extents: Vec3::new(inf, inf, inf) },
            center: Vec3::zero(),
            shell_width: T::one(),
            peak_density: density,
            albedo,
        }])
    }

    pub fn cast<U: Real>(&self) -> AnalyticScene<U> {
        AnalyticScene {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive {
                    shape: match &p.shape {
                        Shape::Sphere { radius } => Shape::Sphere { radius: radius.cast() },
                        Shape::Box { half_extents } => Shape::Box { half_extents: half_extents.cast() },
                    },
                    center: p.center.cast(),
                    shell_width: p.shell_width.cast(),
                    peak_density: p.peak_density.cast(),
                    albedo: p.albedo.cast(),
                })
                .collect(),
            view_tint: self.view_tint.cast(),
        }
    }

    fn tint(&self, d: Vec3<T>) -> T {
        T::one() - self.view_tint * (T::one() - d.z) * T::lit(0.5)
    }

    fn evaluate(&self, x: Vec3<T>, d: Vec3<T>, with_grads: bool) -> FieldGrads<T> {
        let floor = T::lit(COLOR_BLEND_FLOOR);
        let mut density = T::zero();
        let mut weight_sum = T::zero();
        let mut weighted = Vec3::zero();
        let mut d_density = Vec3::zero();
        // Σ aᵢ ⊗ ∇σᵢ, needed for the color Jacobian
        let mut albedo_grad = Mat3::zero();
        for p in &self.primitives {
            let (s, g) = p.density(x, with_grads);
            density += s;
            let w = s + floor;
            weight_sum += w;
            weighted += p.albedo * w;
            if with_grads {
                d_density += g;
                albedo_grad = albedo_grad + Mat3::outer(p.albedo, g);
            }
        }
        let mix = if weight_sum > T::zero() { weighted.map(|v| v / weight_sum) } else { Vec3::zero() };
        let tint = self.tint(d);
        let output = FieldOutput { density, color: mix * tint };
        if !with_grads || weight_sum == T::zero() {
            return FieldGrads { output, d_density_dx: d_density, d_color_dx: Mat3::zero(), d_color_dd: Mat3::zero() };
        }
        // ∂mix/∂x = (Σ aᵢ ⊗ ∇σᵢ − mix ⊗ Σ∇σᵢ) / W
        let d_mix = (albedo_grad - Mat3::outer(mix, d_density)).scale(T::one() / weight_sum);
        let mut d_color_dd = Mat3::zero();
        let dtint_dz = self.view_tint * T::lit(0.5);
        for c in 0..3 {
            d_color_dd.m[c][2] = mix[c] * dtint_dz;
        }
        FieldGrads { output, d_density_dx: d_density, d_color_dx: d_mix.scale(tint), d_color_dd }
    }
}

impl<T: Real> RadianceField<T> for AnalyticScene<T> {
    fn eval(&self, x: Vec3<T>, d: Vec3<T>) -> FieldOutput<T> {
        self.evaluate(x, d, false).output
    }

    fn eval_with_grads(&self, x: Vec3<T>, d: Vec3<T>) -> FieldGrads<T> {
        self.evaluate(x, d, true)
    }
}
