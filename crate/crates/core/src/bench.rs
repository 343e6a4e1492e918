//! Perturb-and-recover trials, success-rate curves and error histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_with_sampler, EstimateError, EstimatorConfig};
use crate::field::RadianceField;
use crate::render::{render_image, Camera, RenderConfig};
use crate::sampler::{RaySampler, SamplerError, Strategy};
use crate::scalar::Real;
use crate::se3::{perturb_pose, pose_errors, Pose, PoseError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("trial {trial} references unknown scene '{scene}'")]
    UnknownScene { trial: usize, scene: String },
    #[error("invalid benchmark setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub scene: String,
    pub ground_truth: Pose<f64>,
    pub rot_limit_deg: f64,
    pub trans_limit: f64,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub seed: u64,
}

/// One scene a benchmark can refer to: the field that both renders the
/// observation and is inverted, with its camera and render settings.
#[derive(Clone)]
pub struct SceneEntry<T> {
    pub field: Arc<dyn RadianceField<T>>,
    pub camera: Camera<T>,
    pub render: RenderConfig<T>,
}

pub type FieldStore<T> = BTreeMap<String, SceneEntry<T>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Step budget and optimizer settings. Strategy and batch size come from
    /// each trial, render settings from the scene.
    pub estimator: EstimatorConfig,
    pub log_every: usize,
    pub rot_threshold_deg: f64,
    pub trans_threshold: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { estimator: EstimatorConfig::default(), log_every: 10, rot_threshold_deg: 5.0, trans_threshold: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub spec: TrialSpec,
    pub initial_error: PoseError,
    /// `None` when the run diverged.
    pub final_error: Option<PoseError>,
    pub diverged_at: Option<usize>,
    /// Error at each logged step; `None` once the run has diverged.
    pub logged: Vec<Option<PoseError>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub steps: Vec<usize>,
    pub rotation_success: Vec<f64>,
    pub translation_success: Vec<f64>,
    /// Both thresholds met.
    pub joint_success: Vec<f64>,
    pub trials: Vec<TrialResult>,
    pub rotation_histogram: Histogram,
    pub translation_histogram: Histogram,
}

impl BenchReport {
    /// Joint success fraction at the logged step nearest below or at `step`.
    pub fn success_at(&self, step: usize) -> f64 {
        let idx = self.steps.iter().rposition(|&s| s <= step).unwrap_or(0);
        self.joint_success[idx]
    }

    pub fn final_success(&self) -> f64 {
        *self.joint_success.last().unwrap_or(&0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// One row per trial per logged step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,scene,strategy,batch_size,seed,step,rotation_error_deg,translation_error,success\n");
        for (i, t) in self.trials.iter().enumerate() {
            for (&step, e) in self.steps.iter().zip(&t.logged) {
                let _ = write!(out, "{i},{},{},{},{},{step},", t.spec.scene, t.spec.strategy, t.spec.batch_size, t.spec.seed);
                match e {
                    Some(e) => {
                        let ok = e.within(self.config.rot_threshold_deg, self.config.trans_threshold);
                        let _ = writeln!(out, "{},{},{}", e.rotation_deg, e.translation, ok as u8);
                    }
                    None => out.push_str(",,0\n"),
                }
            }
        }
        out
    }
}

/// Counts per bin `[edges[k], edges[k+1])`; values outside the range land in
/// the first or last bin, so totals are preserved.
pub fn bin_counts(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len().saturating_sub(1);
    let mut counts = vec![0; bins];
    if bins == 0 {
        return counts;
    }
    for &v in values {
        let k = edges[1..bins].iter().take_while(|&&e| v >= e).count();
        counts[k] += 1;
    }
    counts
}

pub fn make_histogram(before: &[f64], after: &[f64], edges: &[f64]) -> Histogram {
    Histogram { edges: edges.to_vec(), before: bin_counts(before, edges), after: bin_counts(after, edges) }
}

/// `n` evenly spaced bin edges from `lo` to `hi` (inclusive), `n − 1` bins.
pub fn linear_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect()
}

/// `n` trials cycling over `ground_truths`, seeds `seed0, seed0 + 1, …`.
pub fn trial_specs(
    scene: &str,
    ground_truths: &[Pose<f64>],
    n: usize,
    limits: (f64, f64),
    strategy: Strategy,
    batch_size: usize,
    seed0: u64,
) -> Vec<TrialSpec> {
    (0..n)
        .map(|i| TrialSpec {
            scene: scene.to_string(),
            ground_truth: ground_truths[i % ground_truths.len()],
            rot_limit_deg: limits.0,
            trans_limit: limits.1,
            strategy,
            batch_size,
            seed: seed0 + i as u64,
        })
        .collect()
}

fn run_trial<T: Real>(spec: &TrialSpec, entry: &SceneEntry<T>, config: &BenchConfig) -> Result<TrialResult, BenchError> {
    let truth: Pose<T> = spec.ground_truth.cast();
    let observed = render_image(entry.field.as_ref(), &entry.camera, &truth, &entry.render, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let initial = perturb_pose(&truth, spec.rot_limit_deg, spec.trans_limit, &mut rng);
    let est_config =
        EstimatorConfig { strategy: spec.strategy, batch_size: spec.batch_size, render: entry.render.cast(), ..config.estimator.clone() };
    let sampler = RaySampler::new(observed, spec.strategy, est_config.dilation())?;
    let steps = logged_steps(config);
    let initial_error = pose_errors(&initial.cast(), &spec.ground_truth);
    let score = |p: Pose<f64>| pose_errors(&p, &spec.ground_truth);
    match estimate_with_sampler(entry.field.as_ref(), &entry.camera, &sampler, &initial, &est_config, &mut rng) {
        Ok(run) => {
            let logged = steps.iter().map(|&s| run.trajectory.pose_at(s).map(score)).collect();
            Ok(TrialResult { spec: spec.clone(), initial_error, final_error: Some(score(run.pose.cast())), diverged_at: None, logged })
        }
        Err(EstimateError::Diverged { step, trajectory }) => {
            let logged = steps.iter().map(|&s| if s < step { trajectory.pose_at(s).map(score) } else { None }).collect();
            Ok(TrialResult { spec: spec.clone(), initial_error, final_error: None, diverged_at: Some(step), logged })
        }
        Err(e) => Err(e.into()),
    }
}

fn logged_steps(config: &BenchConfig) -> Vec<usize> {
    let max = config.estimator.max_steps;
    let every = config.log_every.max(1);
    let mut steps: Vec<usize> = (0..=max).step_by(every).collect();
    if steps.last() != Some(&max) {
        steps.push(max);
    }
    steps
}

/// Runs every trial (in parallel) and aggregates in trial order, so the
/// report depends only on the inputs.
pub fn run_benchmark<T: Real>(specs: &[TrialSpec], store: &FieldStore<T>, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    if specs.is_empty() {
        return Err(BenchError::Invalid("no trials".into()));
    }
    config.estimator.validate()?;
    for (i, s) in specs.iter().enumerate() {
        if !store.contains_key(&s.scene) {
            return Err(BenchError::UnknownScene { trial: i, scene: s.scene.clone() });
        }
        if !(s.rot_limit_deg >= 0.0 && s.rot_limit_deg <= 180.0 && s.trans_limit >= 0.0) {
            return Err(BenchError::Invalid(format!("trial {i} has perturbation limits outside [0, 180]° × [0, ∞)")));
        }
    }
    let trials: Vec<TrialResult> = specs.par_iter().map(|s| run_trial(s, &store[&s.scene], config)).collect::<Result<_, _>>()?;
    let steps = logged_steps(config);
    let n = trials.len() as f64;
    let frac =
        |k: usize, pred: &dyn Fn(&PoseError) -> bool| trials.iter().filter(|t| t.logged[k].as_ref().is_some_and(pred)).count() as f64 / n;
    let (rt, tt) = (config.rot_threshold_deg, config.trans_threshold);
    let rotation_success = (0..steps.len()).map(|k| frac(k, &|e| e.rotation_deg < rt)).collect();
    let translation_success = (0..steps.len()).map(|k| frac(k, &|e| e.translation < tt)).collect();
    let joint_success = (0..steps.len()).map(|k| frac(k, &|e| e.within(rt, tt))).collect();

    // diverged runs count in the last bin
    let after = |f: fn(&PoseError) -> f64| -> Vec<f64> { trials.iter().map(|t| t.final_error.as_ref().map_or(f64::INFINITY, f)).collect() };
    let before = |f: fn(&PoseError) -> f64| -> Vec<f64> { trials.iter().map(|t| f(&t.initial_error)).collect() };
    let rot_edges = linear_edges(0.0, 8.0 * rt, 8);
    let trans_edges = linear_edges(0.0, 8.0 * tt, 8);
    let rotation_histogram = make_histogram(&before(|e| e.rotation_deg), &after(|e| e.rotation_deg), &rot_edges);
    let translation_histogram = make_histogram(&before(|e| e.translation), &after(|e| e.translation), &trans_edges);
    Ok(BenchReport {
        config: config.clone(),
        steps,
        rotation_success,
        translation_success,
        joint_success,
        trials,
        rotation_histogram,
        translation_histogram,
    })
}
