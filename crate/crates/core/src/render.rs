//! Pinhole rays and differentiable emission–absorption volume rendering.
//!
//! A ray's `[near, far]` interval is split into `n` equal bins with one sample
//! per bin (bin midpoint, or uniformly jittered when stratified). With
//! `δᵢ = tᵢ₊₁ − tᵢ` (and `tₙ₊₁ = far`):
//!
//! ```text
//! Ĉ = Σᵢ Tᵢ (1 − exp(−σᵢ δᵢ)) cᵢ + Tₙ₊₁ · background,   Tᵢ = exp(−Σ_{j<i} σⱼ δⱼ)
//! ```
//!
//! Gradients flow back to the ray origin and direction through the sample
//! positions `xᵢ = o + tᵢ d` and through the direction input of the color head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldOutput, RadianceField};
use crate::linalg::Vec3;
use crate::raster::Image;
use crate::scalar::Real;
use crate::se3::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid ray: {0}")]
    InvalidRay(String),
}

/// Pinhole intrinsics in pixels plus the integration range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub width: usize,
    pub height: usize,
    pub focal: T,
    pub cx: T,
    pub cy: T,
    pub near: T,
    pub far: T,
}

impl<T: Real> Camera<T> {
    /// Principal point at the image center.
    pub fn new(width: usize, height: usize, focal: T, near: T, far: T) -> Result<Self, RenderError> {
        let two = T::lit(2.0);
        let cam = Self { width, height, focal, cx: T::from_usize_lossy(width) / two, cy: T::from_usize_lossy(height) / two, near, far };
        cam.validate()?;
        Ok(cam)
    }

    /// Focal length from the horizontal field of view (radians), NeRF-synthetic style.
    pub fn from_fov_x(width: usize, height: usize, camera_angle_x: T, near: T, far: T) -> Result<Self, RenderError> {
        let focal = T::lit(0.5) * T::from_usize_lossy(width) / (T::lit(0.5) * camera_angle_x).tan();
        Self::new(width, height, focal, near, far)
    }

    pub fn camera_angle_x(&self) -> T {
        T::lit(2.0) * (T::lit(0.5) * T::from_usize_lossy(self.width) / self.focal).atan()
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("empty image".into()));
        }
        if !(self.focal > T::zero()) || !self.focal.is_finite() {
            return Err(RenderError::InvalidCamera("focal length must be positive".into()));
        }
        if !(self.near > T::zero() && self.near < self.far) || !self.far.is_finite() {
            return Err(RenderError::InvalidCamera("need 0 < near < far".into()));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            width: self.width,
            height: self.height,
            focal: self.focal.cast(),
            cx: self.cx.cast(),
            cy: self.cy.cast(),
            near: self.near.cast(),
            far: self.far.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
    pub near: T,
    pub far: T,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: Vec3<T>, direction: Vec3<T>, near: T, far: T) -> Result<Self, RenderError> {
        if (direction.norm() - T::one()).abs() > T::lit(1e-6) {
            return Err(RenderError::InvalidRay("direction must be unit length".into()));
        }
        if !(near < far) {
            return Err(RenderError::InvalidRay("need near < far".into()));
        }
        Ok(Self { origin, direction, near, far })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig<T> {
    pub n_samples: usize,
    pub stratified: bool,
    pub background: Vec3<T>,
}

impl<T: Real> Default for RenderConfig<T> {
    /// 128 midpoint samples over a white background.
    fn default() -> Self {
        Self { n_samples: 128, stratified: false, background: Vec3::new(T::one(), T::one(), T::one()) }
    }
}

impl<T: Real> RenderConfig<T> {
    pub fn cast<U: Real>(&self) -> RenderConfig<U> {
        RenderConfig { n_samples: self.n_samples, stratified: self.stratified, background: self.background.cast() }
    }
}

/// Ray through continuous pixel coordinates `(u, v)`; `(0, 0)` is the top-left
/// image corner. Camera looks down its local −z with +y up.
pub fn camera_ray<T: Real>(camera: &Camera<T>, pose: &Pose<T>, u: T, v: T) -> Result<Ray<T>, RenderError> {
    let (w, h) = (T::from_usize_lossy(camera.width), T::from_usize_lossy(camera.height));
    if !(u >= T::zero() && u <= w && v >= T::zero() && v <= h) {
        return Err(RenderError::PixelOutOfBounds { u: u.to_f64_lossy(), v: v.to_f64_lossy(), width: camera.width, height: camera.height });
    }
    Ok(ray_unchecked(camera, pose, u, v))
}

/// Ray through the center of integer pixel `(u, v)`.
pub fn pixel_ray<T: Real>(camera: &Camera<T>, pose: &Pose<T>, u: usize, v: usize) -> Result<Ray<T>, RenderError> {
    if u >= camera.width || v >= camera.height {
        return Err(RenderError::PixelOutOfBounds { u: u as f64, v: v as f64, width: camera.width, height: camera.height });
    }
    let half = T::lit(0.5);
    Ok(ray_unchecked(camera, pose, T::from_usize_lossy(u) + half, T::from_usize_lossy(v) + half))
}

#[inline]
fn ray_unchecked<T: Real>(camera: &Camera<T>, pose: &Pose<T>, u: T, v: T) -> Ray<T> {
    let local = Vec3::new((u - camera.cx) / camera.focal, -(v - camera.cy) / camera.focal, -T::one());
    Ray { origin: pose.translation, direction: pose.rotation.mul_vec(local.normalize()), near: camera.near, far: camera.far }
}

/// Sample distances `tᵢ` and interval lengths `δᵢ` along a ray.
pub fn sample_distances<T: Real, R: Rng + ?Sized>(near: T, far: T, config: &RenderConfig<T>, rng: &mut R) -> (Vec<T>, Vec<T>) {
    let n = config.n_samples;
    let bin = (far - near) / T::from_usize_lossy(n);
    let ts: Vec<T> = (0..n)
        .map(|i| {
            let offset = if config.stratified { T::lit(rng.random::<f64>()) } else { T::lit(0.5) };
            near + (T::from_usize_lossy(i) + offset) * bin
        })
        .collect();
    let deltas = (0..n).map(|i| if i + 1 < n { ts[i + 1] - ts[i] } else { far - ts[i] }).collect();
    (ts, deltas)
}

/// Quadrature weights `wᵢ = Tᵢ (1 − exp(−σᵢ δᵢ))` and the residual transmittance `Tₙ₊₁`.
pub fn composite_weights<T: Real>(densities: &[T], deltas: &[T]) -> (Vec<T>, T) {
    let mut optical = T::zero();
    let mut weights = Vec::with_capacity(densities.len());
    for (&s, &d) in densities.iter().zip(deltas) {
        let t_i = (-optical).exp();
        optical += s * d;
        weights.push(t_i * (T::one() - (-s * d).exp()));
    }
    (weights, (-optical).exp())
}

struct Traced<T> {
    ts: Vec<T>,
    deltas: Vec<T>,
    positions: Vec<Vec3<T>>,
    outputs: Vec<FieldOutput<T>>,
}

fn trace<T: Real, F: RadianceField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    config: &RenderConfig<T>,
    rng: &mut R,
) -> Traced<T> {
    let (ts, deltas) = sample_distances(ray.near, ray.far, config, rng);
    let positions: Vec<Vec3<T>> = ts.iter().map(|&t| ray.origin + ray.direction * t).collect();
    let mut outputs = vec![FieldOutput::default(); positions.len()];
    field.eval_samples(&positions, ray.direction, &mut outputs);
    Traced { ts, deltas, positions, outputs }
}

fn composite<T: Real>(tr: &Traced<T>, background: Vec3<T>) -> (Vec3<T>, Vec<T>, T) {
    composite_outputs(&tr.outputs, &tr.deltas, background)
}

/// Composited color, per-sample weights and residual transmittance.
pub fn composite_outputs<T: Real>(outputs: &[FieldOutput<T>], deltas: &[T], background: Vec3<T>) -> (Vec3<T>, Vec<T>, T) {
    let densities: Vec<T> = outputs.iter().map(|o| o.density).collect();
    let (weights, residual) = composite_weights(&densities, deltas);
    let mut color = Vec3::zero();
    for (w, o) in weights.iter().zip(outputs) {
        color += o.color * *w;
    }
    (color + background * residual, weights, residual)
}

/// Adjoint of [`composite_outputs`]: per-sample `(∂L/∂σᵢ, ∂L/∂cᵢ)` for `g = ∂L/∂Ĉ`.
pub fn composite_backward<T: Real>(
    outputs: &[FieldOutput<T>],
    deltas: &[T],
    weights: &[T],
    residual: T,
    background: Vec3<T>,
    g: Vec3<T>,
) -> Vec<(T, Vec3<T>)> {
    let n = outputs.len();
    let mut upstream = vec![(T::zero(), Vec3::zero()); n];
    // Suffix sums Sᵢ = Σ_{k>i} w_k c_k + Tₙ₊₁ bg and transmittances Tᵢ₊₁.
    let mut suffix = background * residual;
    let mut t_next = residual;
    for i in (0..n).rev() {
        let c = outputs[i].color;
        upstream[i] = (deltas[i] * g.dot(c * t_next - suffix), g * weights[i]);
        suffix += c * weights[i];
        // Tᵢ = Tᵢ₊₁ + wᵢ
        t_next += weights[i];
    }
    upstream
}

/// Expected color along a ray. `rng` is only consumed when stratified.
pub fn render_ray<T: Real, F: RadianceField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    config: &RenderConfig<T>,
    rng: &mut R,
) -> Vec3<T> {
    let tr = trace(field, ray, config, rng);
    composite(&tr, config.background).0
}

/// Rendered color with the loss gradients w.r.t. the ray origin and direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayGradient<T> {
    pub color: Vec3<T>,
    pub d_origin: Vec3<T>,
    pub d_direction: Vec3<T>,
}

/// Renders a ray, asks `upstream` for `∂L/∂Ĉ` given the rendered color, and
/// backpropagates it to the ray origin and (unnormalized) direction.
pub fn render_ray_backward<T, F, R>(
    field: &F,
    ray: &Ray<T>,
    config: &RenderConfig<T>,
    rng: &mut R,
    upstream: impl FnOnce(Vec3<T>) -> Vec3<T>,
) -> RayGradient<T>
where
    T: Real,
    F: RadianceField<T> + ?Sized,
    R: Rng + ?Sized,
{
    let tr = trace(field, ray, config, rng);
    let (color, weights, residual) = composite(&tr, config.background);
    let g = upstream(color);
    let n = tr.ts.len();
    if g == Vec3::zero() {
        return RayGradient { color, d_origin: Vec3::zero(), d_direction: Vec3::zero() };
    }
    let upstream_samples = composite_backward(&tr.outputs, &tr.deltas, &weights, residual, config.background, g);
    let mut dx = vec![Vec3::zero(); n];
    let dd_head = field.backprop_samples(&tr.positions, ray.direction, &upstream_samples, &mut dx);
    let mut d_origin = Vec3::zero();
    let mut d_direction = dd_head;
    for (gx, &t) in dx.iter().zip(&tr.ts) {
        d_origin += *gx;
        d_direction += *gx * t;
    }
    RayGradient { color, d_origin, d_direction }
}

/// Gradients of `d_loss_d_color · Ĉ` w.r.t. ray origin and direction.
pub fn render_ray_with_pose_grads<T: Real, F: RadianceField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    config: &RenderConfig<T>,
    d_loss_d_color: Vec3<T>,
    rng: &mut R,
) -> RayGradient<T> {
    render_ray_backward(field, ray, config, rng, |_| d_loss_d_color)
}

/// Per-ray generator split from a master seed, independent of thread scheduling.
pub fn ray_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders integer pixels (through their centers), preserving order.
pub fn render_pixels<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    pose: &Pose<T>,
    pixels: &[(usize, usize)],
    config: &RenderConfig<T>,
    seed: u64,
) -> Result<Vec<Vec3<T>>, RenderError> {
    let rays = pixels.iter().map(|&(u, v)| pixel_ray(camera, pose, u, v)).collect::<Result<Vec<_>, _>>()?;
    Ok(rays.par_iter().enumerate().map(|(i, ray)| render_ray(field, ray, config, &mut ray_rng(seed, i))).collect())
}

/// Renders a full frame.
pub fn render_image<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    pose: &Pose<T>,
    config: &RenderConfig<T>,
    seed: u64,
) -> Image<T> {
    let pixels: Vec<(usize, usize)> = (0..camera.height).flat_map(|v| (0..camera.width).map(move |u| (u, v))).collect();
    let colors = render_pixels(field, camera, pose, &pixels, config, seed).expect("all pixels in bounds");
    Image::from_pixels(camera.width, camera.height, colors)
}
