//! Pose estimation by photometric alignment.
//!
//! The estimate is `exp(ξ) · T₀`: exponential coordinates `ξ` act on the left
//! of the initial camera-to-world pose. Every step samples a pixel batch,
//! renders it, and pulls the loss gradient back through the rays and the SE(3)
//! left Jacobian to `ξ`, which Adam then updates.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::RadianceField;
use crate::linalg::{Mat3, Vec3};
use crate::raster::Image;
use crate::render::{pixel_ray, ray_rng, render_ray, render_ray_backward, Camera, RenderConfig, RenderError};
use crate::sampler::{default_dilation, PixelBatch, RaySampler, SamplerError, Strategy};
use crate::scalar::Real;
use crate::se3::{exp_se3, log_se3, pose_errors, pullback_left_gradient, ExpCoords, Pose, Se3Error};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("optimization diverged at step {step}")]
    Diverged { step: usize, trajectory: Box<Trajectory> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Se3(#[from] Se3Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Rgb,
    /// Chroma only: squared error of the U and V channels.
    YuvUv,
}

/// Stop once the mean loss of the last `window` steps differs from the
/// preceding window's by less than `tolerance` (relative).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub window: usize,
    pub tolerance: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Self { window: 20, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub strategy: Strategy,
    /// Dilation rounds for region sampling; `None` picks by batch size.
    pub dilation_iters: Option<usize>,
    pub loss: LossMode,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub init_std: f64,
    /// `None` runs exactly `max_steps` steps.
    pub convergence: Option<Convergence>,
    pub render: RenderConfig<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            max_steps: 300,
            strategy: Strategy::InterestRegion,
            dilation_iters: None,
            loss: LossMode::Rgb,
            lr0: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            init_std: 1e-6,
            convergence: None,
            render: RenderConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimateError> {
        let bad = |m: &str| Err(EstimateError::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr0 > 0.0) {
            return bad("initial learning rate must be positive");
        }
        if !(self.init_std >= 0.0) {
            return bad("init std must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.render.n_samples == 0 {
            return bad("need at least one sample per ray");
        }
        if let Some(c) = self.convergence {
            if c.window == 0 {
                return bad("convergence window must be at least 1");
            }
        }
        Ok(())
    }

    pub fn dilation(&self) -> usize {
        self.dilation_iters.unwrap_or_else(|| default_dilation(self.batch_size))
    }

    /// `α₀ · 0.8^(t/100)`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        self.lr0 * 0.8f64.powf(step as f64 / 100.0)
    }
}

/// `0.01 · 0.8^(t/100)`.
pub fn lr_schedule(step: usize) -> f64 {
    EstimatorConfig::default().learning_rate(step)
}

/// BT.709 RGB → YUV.
pub const RGB_TO_YUV: [[f64; 3]; 3] = [[0.2126, 0.7152, 0.0722], [-0.09991, -0.33609, 0.436], [0.615, -0.55861, -0.05639]];

/// Loss contribution `ℓ` of one pixel and `∂ℓ/∂Ĉ`, before the `1/b` mean.
fn pixel_loss<T: Real>(rendered: Vec3<T>, observed: Vec3<T>, mode: LossMode) -> (T, Vec3<T>) {
    let r = rendered - observed;
    match mode {
        LossMode::Rgb => (r.norm_squared(), r * T::lit(2.0)),
        LossMode::YuvUv => {
            let p = Mat3::from_rows(RGB_TO_YUV.map(|row| row.map(T::lit)));
            let mut yuv = p.mul_vec(r);
            yuv.x = T::zero();
            (yuv.norm_squared(), p.tr_mul_vec(yuv) * T::lit(2.0))
        }
    }
}

/// Mean photometric loss over the batch and the per-pixel gradient w.r.t. the
/// rendered colors.
pub fn photometric_loss<T: Real>(rendered: &[Vec3<T>], observed: &[Vec3<T>], mode: LossMode) -> Result<(T, Vec<Vec3<T>>), EstimateError> {
    if rendered.len() != observed.len() || rendered.is_empty() {
        return Err(EstimateError::InvalidArgument(format!(
            "need equal non-empty color lists, got {} and {}",
            rendered.len(),
            observed.len()
        )));
    }
    let inv_b = T::one() / T::from_usize_lossy(rendered.len());
    let mut loss = T::zero();
    let grads = rendered
        .iter()
        .zip(observed)
        .map(|(&c, &o)| {
            let (l, g) = pixel_loss(c, o, mode);
            loss += l;
            g * inv_b
        })
        .collect();
    Ok((loss * inv_b, grads))
}

/// Optimizer state of one pose estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate<T> {
    pub coords: ExpCoords<T>,
    pub base: Pose<T>,
    pub m: [T; 6],
    pub v: [T; 6],
    pub step: usize,
    pub losses: Vec<f64>,
}

impl<T: Real> PoseEstimate<T> {
    /// Current hypothesis `exp(ξ) · T₀`.
    pub fn pose(&self) -> Pose<T> {
        exp_se3(&self.coords).expect("finite coordinates").compose(&self.base)
    }
}

/// Coordinates drawn from `N(0, σ²)` per entry; moments zero.
pub fn init_estimate<T: Real, R: Rng + ?Sized>(base: &Pose<T>, init_std: f64, rng: &mut R) -> Result<PoseEstimate<T>, EstimateError> {
    base.validate()?;
    let mut coords = [T::zero(); 6];
    if init_std > 0.0 {
        let normal = Normal::new(0.0, init_std).map_err(|e| EstimateError::InvalidArgument(e.to_string()))?;
        for c in &mut coords {
            *c = T::lit(normal.sample(rng));
        }
    } else if !(init_std == 0.0) {
        return Err(EstimateError::InvalidArgument("init std must be non-negative".into()));
    }
    Ok(PoseEstimate { coords: ExpCoords(coords), base: *base, m: [T::zero(); 6], v: [T::zero(); 6], step: 0, losses: Vec::new() })
}

/// Mean loss of `batch` under `pose`. With `stratified` rendering the per-ray
/// jitter comes from `seed`.
pub fn batch_loss<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    pose: &Pose<T>,
    batch: &PixelBatch<T>,
    loss: LossMode,
    render: &RenderConfig<T>,
    seed: u64,
) -> Result<T, EstimateError> {
    let rays = batch.pixels.iter().map(|&(u, v)| pixel_ray(camera, pose, u, v)).collect::<Result<Vec<_>, _>>()?;
    let rendered: Vec<Vec3<T>> = rays.par_iter().enumerate().map(|(i, r)| render_ray(field, r, render, &mut ray_rng(seed, i))).collect();
    Ok(photometric_loss(&rendered, &batch.colors, loss)?.0)
}

/// Mean loss of `batch` at `exp(ξ) · T₀` and its gradient w.r.t. `ξ`.
pub fn loss_and_gradient<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    base: &Pose<T>,
    coords: &ExpCoords<T>,
    batch: &PixelBatch<T>,
    loss: LossMode,
    render: &RenderConfig<T>,
    seed: u64,
) -> Result<(T, [T; 6]), EstimateError> {
    if batch.is_empty() {
        return Err(EstimateError::InvalidArgument("empty pixel batch".into()));
    }
    let pose = exp_se3(coords)?.compose(base);
    let rays = batch.pixels.iter().map(|&(u, v)| pixel_ray(camera, &pose, u, v)).collect::<Result<Vec<_>, _>>()?;
    let inv_b = T::one() / T::from_usize_lossy(batch.len());
    let per_ray: Vec<(T, [T; 6])> = rays
        .par_iter()
        .zip(&batch.colors)
        .enumerate()
        .map(|(i, (ray, &observed))| {
            let mut l = T::zero();
            let g = render_ray_backward(field, ray, render, &mut ray_rng(seed, i), |c| {
                let (li, gi) = pixel_loss(c, observed, loss);
                l = li;
                gi * inv_b
            });
            // A left perturbation [ω | v] moves the origin by ω×o + v and the
            // direction by ω×d.
            let g_rot = ray.origin.cross(g.d_origin) + ray.direction.cross(g.d_direction);
            (l, [g_rot.x, g_rot.y, g_rot.z, g.d_origin.x, g.d_origin.y, g.d_origin.z])
        })
        .collect();
    let mut total = T::zero();
    let mut g_eps = [T::zero(); 6];
    for (l, g) in per_ray {
        total += l;
        for k in 0..6 {
            g_eps[k] += g[k];
        }
    }
    Ok((total * inv_b, pullback_left_gradient(coords, &g_eps)))
}

/// One optimization step on a fresh batch from `sampler`. Returns the loss at
/// the pose the step started from.
pub fn pose_step<T: Real, F: RadianceField<T> + ?Sized, R: Rng + ?Sized>(
    estimate: &mut PoseEstimate<T>,
    field: &F,
    camera: &Camera<T>,
    sampler: &RaySampler<T>,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<f64, EstimateError> {
    let batch = sampler.sample(config.batch_size, rng)?;
    let seed: u64 = rng.random();
    let render = config.render.cast::<T>();
    let diverged = |e: &PoseEstimate<T>| EstimateError::Diverged { step: e.step, trajectory: Box::default() };
    let (loss, grad) = loss_and_gradient(field, camera, &estimate.base, &estimate.coords, &batch, config.loss, &render, seed)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(diverged(estimate));
    }
    let t = estimate.step as i32 + 1;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::one() - T::lit(config.beta1.powi(t));
    let c2 = T::one() - T::lit(config.beta2.powi(t));
    let lr = T::lit(config.learning_rate(estimate.step));
    let mut next = estimate.coords;
    for k in 0..6 {
        estimate.m[k] = b1 * estimate.m[k] + (T::one() - b1) * grad[k];
        estimate.v[k] = b2 * estimate.v[k] + (T::one() - b2) * grad[k] * grad[k];
        let m_hat = estimate.m[k] / c1;
        let v_hat = estimate.v[k] / c2;
        next.0[k] -= lr * m_hat / (v_hat.sqrt() + T::lit(config.adam_eps));
    }
    if !next.is_finite() {
        return Err(diverged(estimate));
    }
    estimate.coords = next;
    estimate.step += 1;
    let loss = loss.to_f64_lossy();
    estimate.losses.push(loss);
    Ok(loss)
}

/// The pose at the start of step `step` and the batch loss measured there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    pub pose: Pose<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
    pub final_pose: Option<Pose<f64>>,
}

impl Trajectory {
    pub fn steps_run(&self) -> usize {
        self.entries.len()
    }

    /// Pose before step `step`; past the last step, the final pose.
    pub fn pose_at(&self, step: usize) -> Option<Pose<f64>> {
        self.entries.get(step).map(|e| e.pose).or(self.final_pose)
    }

    /// One row per step plus a final row with an empty loss. Columns: step,
    /// loss, the six coordinates of the pose's logarithm, and when `truth` is
    /// given the rotation (degrees) and translation errors.
    pub fn to_csv(&self, truth: Option<&Pose<f64>>) -> String {
        let mut out = String::from("step,loss,w1,w2,w3,v1,v2,v3");
        if truth.is_some() {
            out.push_str(",rotation_error_deg,translation_error");
        }
        out.push('\n');
        let rows =
            self.entries.iter().map(|e| (e.step, Some(e.loss), e.pose)).chain(self.final_pose.map(|p| (self.entries.len(), None, p)));
        for (step, loss, pose) in rows {
            let _ = write!(out, "{step},{}", loss.map(|l| l.to_string()).unwrap_or_default());
            match log_se3(&pose) {
                Ok(xi) => xi.0.iter().for_each(|c| {
                    let _ = write!(out, ",{c}");
                }),
                Err(_) => out.push_str(",,,,,,"),
            }
            if let Some(t) = truth {
                let e = pose_errors(&pose, t);
                let _ = write!(out, ",{},{}", e.rotation_deg, e.translation);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateResult<T> {
    pub pose: Pose<T>,
    pub trajectory: Trajectory,
    pub estimate: PoseEstimate<T>,
}

fn converged(losses: &[f64], c: &Convergence) -> bool {
    let w = c.window;
    if losses.len() < 2 * w {
        return false;
    }
    let n = losses.len();
    let recent: f64 = losses[n - w..].iter().sum::<f64>() / w as f64;
    let before: f64 = losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
    (recent - before).abs() <= c.tolerance * before.abs().max(f64::MIN_POSITIVE)
}

/// Runs [`pose_step`] from `initial` until `max_steps` or convergence.
pub fn estimate_pose<T: Real, F: RadianceField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    observed: &Image<T>,
    initial: &Pose<T>,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<EstimateResult<T>, EstimateError> {
    config.validate()?;
    camera.validate()?;
    if observed.width() != camera.width || observed.height() != camera.height {
        return Err(EstimateError::InvalidArgument(format!(
            "observed image is {}x{} but the camera is {}x{}",
            observed.width(),
            observed.height(),
            camera.width,
            camera.height
        )));
    }
    let sampler = RaySampler::new(observed.clone(), config.strategy, config.dilation())?;
    estimate_with_sampler(field, camera, &sampler, initial, config, rng)
}

/// [`estimate_pose`] with a prepared sampler, for callers that reuse detections.
pub fn estimate_with_sampler<T: Real, F: RadianceField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    sampler: &RaySampler<T>,
    initial: &Pose<T>,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<EstimateResult<T>, EstimateError> {
    config.validate()?;
    let mut estimate = init_estimate(initial, config.init_std, rng)?;
    let mut trajectory = Trajectory::default();
    for _ in 0..config.max_steps {
        let pose = estimate.pose().cast::<f64>();
        match pose_step(&mut estimate, field, camera, sampler, config, rng) {
            Ok(loss) => trajectory.entries.push(TrajectoryEntry { step: estimate.step - 1, pose, loss }),
            Err(EstimateError::Diverged { step, .. }) => return Err(EstimateError::Diverged { step, trajectory: Box::new(trajectory) }),
            Err(e) => return Err(e),
        }
        if let Some(c) = &config.convergence {
            if converged(&estimate.losses, c) {
                break;
            }
        }
    }
    let pose = estimate.pose();
    trajectory.final_pose = Some(pose.cast());
    Ok(EstimateResult { pose, trajectory, estimate })
}
