//! Fitting an [`MlpField`] to posed images, and the semi-supervised loop that
//! labels unposed images with estimated poses before retraining.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_pose, EstimateError, EstimatorConfig};
use crate::field::{FieldOutput, MlpArchitecture, MlpField, MlpScratch, RadianceField};
use crate::linalg::Vec3;
use crate::raster::{Image, ImageError};
use crate::render::{composite_backward, composite_outputs, pixel_ray, ray_rng, render_image, sample_distances, Camera, Ray, RenderConfig};
use crate::scalar::Real;
use crate::scenes::Frame;
use crate::se3::{pose_errors, Pose, PoseError};

/// Rays per unit of work in the gradient reduction. Fixed so the summation
/// order, and therefore the result, does not depend on the thread count.
const RAY_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("pose estimation for unlabeled image {image} failed: {source}")]
    Estimate { image: usize, source: EstimateError },
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: Box<TrainError> },
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn in_stage(stage: &'static str) -> impl FnOnce(TrainError) -> TrainError {
    move |e| TrainError::Stage { stage, source: Box::new(e) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedDataset<T> {
    pub camera: Camera<T>,
    pub frames: Vec<Frame<T>>,
    pub unposed: Vec<Image<T>>,
}

impl<T: Real> PosedDataset<T> {
    pub fn new(camera: Camera<T>, frames: Vec<Frame<T>>) -> Self {
        Self { camera, frames, unposed: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.camera.validate().map_err(|e| TrainError::InvalidDataset(e.to_string()))?;
        let (w, h) = (self.camera.width, self.camera.height);
        let images = self.frames.iter().map(|f| &f.image).chain(&self.unposed);
        if images.into_iter().any(|im| im.width() != w || im.height() != h) {
            return Err(TrainError::InvalidDataset(format!("every image must be {w}x{h}")));
        }
        if let Some(f) = self.frames.iter().find(|f| !f.pose.is_valid()) {
            return Err(TrainError::InvalidDataset(format!("invalid pose {:?}", f.pose)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr: f64,
    /// Learning rate multiplier reached at the final iteration (exponential decay).
    pub lr_decay: f64,
    pub seed: u64,
    pub arch: MlpArchitecture,
    pub render: RenderConfig<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_rays: 256,
            lr: 5e-3,
            lr_decay: 0.1,
            seed: 0,
            arch: MlpArchitecture::default(),
            render: RenderConfig { n_samples: 48, stratified: true, background: Vec3::new(1.0, 1.0, 1.0) },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 || self.batch_rays == 0 || self.render.n_samples == 0 {
            return Err(TrainError::InvalidConfig("iterations, rays per batch and samples per ray must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate and decay must be positive".into()));
        }
        self.arch.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay.powf(iteration as f64 / self.iterations as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub field: MlpField<T>,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// `10·log₁₀(1/MSE)`; identical images give `+∞`.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64, ImageError> {
    let mse = a.mse(b)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean PSNR of deterministic renders against the given frames.
pub fn evaluate_psnr<T: Real, F: RadianceField<T> + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    frames: &[Frame<T>],
    render: &RenderConfig<T>,
) -> Result<f64, ImageError> {
    let deterministic = RenderConfig { stratified: false, ..*render };
    let mut total = 0.0;
    for f in frames {
        total += psnr(&render_image(field, camera, &f.pose, &deterministic, 0), &f.image)?;
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Squared color error of one ray; adds `scale · ∂err/∂Θ` into `grad`.
fn accumulate_ray<T: Real, R: Rng + ?Sized>(
    field: &MlpField<T>,
    ray: &Ray<T>,
    target: Vec3<T>,
    render: &RenderConfig<T>,
    rng: &mut R,
    scale: T,
    grad: &mut [T],
    scratch: &mut MlpScratch<T>,
) -> T {
    let (ts, deltas) = sample_distances(ray.near, ray.far, render, rng);
    let xs: Vec<Vec3<T>> = ts.iter().map(|&t| ray.origin + ray.direction * t).collect();
    let mut outputs = vec![FieldOutput::default(); xs.len()];
    field.forward_ray(&xs, ray.direction, scratch, &mut outputs);
    let (color, weights, residual) = composite_outputs(&outputs, &deltas, render.background);
    let r = color - target;
    let upstream = composite_backward(&outputs, &deltas, &weights, residual, render.background, r * (T::lit(2.0) * scale));
    for (i, &(gs, gc)) in upstream.iter().enumerate() {
        if gs != T::zero() || gc != Vec3::zero() {
            field.backward_sample(scratch, i, gs, gc, Some(grad), false);
        }
    }
    r.norm_squared()
}

/// Squared color error of a single ray and its gradient w.r.t. the field parameters.
pub fn ray_param_gradient<T: Real, R: Rng + ?Sized>(
    field: &MlpField<T>,
    ray: &Ray<T>,
    target: Vec3<T>,
    render: &RenderConfig<T>,
    rng: &mut R,
) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); field.num_params()];
    let loss = accumulate_ray(field, ray, target, render, rng, T::one(), &mut grad, &mut MlpScratch::new());
    (loss, grad)
}

/// Mean squared error over `rays` and its parameter gradient, reduced in a
/// fixed order.
pub fn batch_param_gradient<T: Real>(field: &MlpField<T>, rays: &[(Ray<T>, Vec3<T>)], render: &RenderConfig<T>, seed: u64) -> (T, Vec<T>) {
    let scale = T::one() / T::from_usize_lossy(rays.len().max(1));
    let partials: Vec<(T, Vec<T>)> = rays
        .par_chunks(RAY_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grad = vec![T::zero(); field.num_params()];
            let mut scratch = MlpScratch::new();
            let mut loss = T::zero();
            for (k, (ray, target)) in chunk.iter().enumerate() {
                let mut rng = ray_rng(seed, c * RAY_CHUNK + k);
                loss += accumulate_ray(field, ray, *target, render, &mut rng, scale, &mut grad, &mut scratch);
            }
            (loss, grad)
        })
        .collect();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); field.num_params()];
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
    }
    (loss * scale, grad)
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (b1, b2) = (T::lit(B1), T::lit(B2));
        let step = T::lit(lr / (1.0 - B1.powi(self.t)));
        let c2 = T::lit(1.0 - B2.powi(self.t));
        let eps = T::lit(1e-8);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            *p -= step * *m / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Fits a freshly initialized field to the posed frames with Adam on random
/// rays drawn across all frames.
pub fn train_field<T: Real>(dataset: &PosedDataset<T>, config: &TrainConfig) -> Result<TrainOutcome<T>, TrainError> {
    dataset.validate()?;
    config.validate()?;
    if dataset.frames.len() < 2 {
        return Err(TrainError::InvalidDataset(format!("need at least 2 posed frames, got {}", dataset.frames.len())));
    }
    let cam = &dataset.camera;
    let render = config.render.cast::<T>();
    let mut field = MlpField::new(config.arch.clone(), config.seed).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let mut adam = Adam::new(field.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let rays: Vec<(Ray<T>, Vec3<T>)> = (0..config.batch_rays)
            .map(|_| {
                let f = &dataset.frames[rng.random_range(0..dataset.frames.len())];
                let (u, v) = (rng.random_range(0..cam.width), rng.random_range(0..cam.height));
                (pixel_ray(cam, &f.pose, u, v).expect("pixel in bounds"), f.image.get(u, v))
            })
            .collect();
        let seed: u64 = rng.random();
        let (loss, grad) = batch_param_gradient(&field, &rays, &render, seed);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { iteration: it });
        }
        losses.push(loss.to_f64_lossy());
        adam.step(field.params_mut(), &grad, config.learning_rate(it));
    }
    Ok(TrainOutcome { field, losses })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfSupConfig {
    pub train: TrainConfig,
    pub estimator: EstimatorConfig,
}

/// Ground truth used only to score the pipeline, never to train it (except
/// for the fully-labeled reference model).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalData<T> {
    pub frames: Vec<Frame<T>>,
    pub unlabeled_poses: Option<Vec<Pose<T>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub train_labeled_s: f64,
    pub estimate_s: f64,
    pub retrain_s: f64,
    pub train_full_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfSupReport {
    pub psnr_labeled: Option<f64>,
    pub psnr_semi: Option<f64>,
    pub psnr_full: Option<f64>,
    /// Index of the labeled frame each unlabeled image started from.
    pub init_frames: Vec<usize>,
    pub initial_errors: Vec<PoseError>,
    pub pose_errors: Vec<PoseError>,
    pub timings: StageTimings,
}

#[derive(Clone, Debug)]
pub struct SelfSupOutcome<T> {
    pub labeled_field: MlpField<T>,
    pub semi_field: MlpField<T>,
    pub estimated_poses: Vec<Pose<T>>,
    pub report: SelfSupReport,
}

/// Index of the labeled frame whose image is closest (MSE) to `image`.
pub fn nearest_labeled<T: Real>(frames: &[Frame<T>], image: &Image<T>) -> Result<usize, ImageError> {
    let mut best = (f64::INFINITY, 0);
    for (i, f) in frames.iter().enumerate() {
        let e = f.image.mse(image)?;
        if e < best.0 {
            best = (e, i);
        }
    }
    Ok(best.1)
}

/// Trains on the labeled frames, estimates a pose for every unlabeled image
/// (starting from the most similar labeled view), then retrains from scratch
/// on the union.
pub fn self_supervise<T: Real>(
    labeled: &PosedDataset<T>,
    unlabeled: &[Image<T>],
    config: &SelfSupConfig,
    eval: Option<&EvalData<T>>,
) -> Result<SelfSupOutcome<T>, TrainError> {
    let cam = &labeled.camera;
    let render = config.train.render.cast::<T>();
    let mut report = SelfSupReport::default();

    let clock = Instant::now();
    let labeled_field = train_field(labeled, &config.train).map_err(in_stage("train"))?.field;
    report.timings.train_labeled_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let jobs: Vec<(usize, Pose<T>)> = unlabeled
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let start = nearest_labeled(&labeled.frames, image)?;
            let mut rng = ray_rng(config.train.seed ^ 0x5eed_0f_1abe1, i);
            estimate_pose(&labeled_field, cam, image, &labeled.frames[start].pose, &config.estimator, &mut rng)
                .map(|r| (start, r.pose))
                .map_err(|source| TrainError::Estimate { image: i, source })
        })
        .collect::<Result<_, _>>()
        .map_err(in_stage("estimate"))?;
    report.timings.estimate_s = clock.elapsed().as_secs_f64();
    report.init_frames = jobs.iter().map(|j| j.0).collect();
    let estimated_poses: Vec<Pose<T>> = jobs.iter().map(|j| j.1).collect();

    let clock = Instant::now();
    let semi_field = if unlabeled.is_empty() {
        labeled_field.clone()
    } else {
        let mut union = labeled.clone();
        union.frames.extend(unlabeled.iter().zip(&estimated_poses).map(|(im, p)| Frame { image: im.clone(), pose: *p }));
        train_field(&union, &config.train).map_err(in_stage("retrain"))?.field
    };
    report.timings.retrain_s = clock.elapsed().as_secs_f64();

    if let Some(ev) = eval {
        report.psnr_labeled = Some(evaluate_psnr(&labeled_field, cam, &ev.frames, &render)?);
        report.psnr_semi = Some(evaluate_psnr(&semi_field, cam, &ev.frames, &render)?);
        if let Some(truth) = &ev.unlabeled_poses {
            if truth.len() != unlabeled.len() {
                return Err(TrainError::InvalidDataset("one ground-truth pose per unlabeled image required".into()));
            }
            report.initial_errors = report.init_frames.iter().zip(truth).map(|(&s, t)| pose_errors(&labeled.frames[s].pose, t)).collect();
            report.pose_errors = estimated_poses.iter().zip(truth).map(|(p, t)| pose_errors(p, t)).collect();
            let clock = Instant::now();
            let mut full = labeled.clone();
            full.frames.extend(unlabeled.iter().zip(truth).map(|(im, p)| Frame { image: im.clone(), pose: *p }));
            let full_field = train_field(&full, &config.train).map_err(in_stage("train_full"))?.field;
            report.timings.train_full_s = Some(clock.elapsed().as_secs_f64());
            report.psnr_full = Some(evaluate_psnr(&full_field, cam, &ev.frames, &render)?);
        }
    }
    Ok(SelfSupOutcome { labeled_field, semi_field, estimated_poses, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::new(4, 4, Vec3::new(0.5f64, 0.5, 0.5));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::new(4, 4, Vec3::new(0.6f64, 0.6, 0.6));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::new(4, 4, Vec3::new(0.51f64, 0.51, 0.51));
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(4, 5, Vec3::zero())).is_err());
    }

    #[test]
    fn learning_rate_decays_to_fraction() {
        let c = TrainConfig { iterations: 100, lr: 1e-2, lr_decay: 0.1, ..TrainConfig::default() };
        assert_eq!(c.learning_rate(0), 1e-2);
        assert!((c.learning_rate(100) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn one_frame_is_not_enough() {
        let cam = Camera::<f64>::new(16, 16, 20.0, 1.0, 3.0).unwrap();
        let frame = Frame { image: Image::new(16, 16, Vec3::zero()), pose: Pose::identity() };
        let ds = PosedDataset::new(cam, vec![frame]);
        assert!(matches!(train_field(&ds, &TrainConfig::default()), Err(TrainError::InvalidDataset(_))));
    }
}
