use std::collections::BTreeSet;

use radiance_pose::bench::{run_benchmark, trial_specs, BenchConfig, FieldStore, SceneEntry};
use radiance_pose::estimator::{estimate_with_sampler, EstimateError, EstimatorConfig};
use radiance_pose::render::render_image;
use radiance_pose::sampler::RaySampler;
use radiance_pose::scenes::{hemisphere_poses, read_dataset, toy_split, write_dataset, Frame, TOY_RADIUS};
use radiance_pose::se3::pose_errors;
use radiance_pose::trainer::{evaluate_psnr, self_supervise, train_field, EvalData, PosedDataset, SelfSupConfig, TrainConfig};
use radiance_pose::{Image, Pose};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::run::{load_settings, read_pose, to_json, RunDir};
use crate::scene::{resolve, LoadedScene};
use crate::{BenchmarkArgs, EstimateArgs, EstimatorFlags, GenerateArgs, RenderArgs, SceneArgs, SelfsupArgs, TrainArgs};

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_estimator_flags(c: &mut EstimatorConfig, f: &EstimatorFlags) {
    set(&mut c.max_steps, f.max_steps);
    set(&mut c.batch_size, f.batch_size);
    set(&mut c.strategy, f.strategy);
    set(&mut c.loss, f.loss);
    set(&mut c.lr0, f.lr);
    if f.dilation.is_some() {
        c.dilation_iters = f.dilation;
    }
}

fn load_scene(a: &SceneArgs) -> Result<LoadedScene, CliError> {
    resolve(a.scene.as_deref(), a.field.as_deref(), a.data.as_deref(), a.size)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSettings {
    pub seed: u64,
    pub scene: String,
    pub size: usize,
    pub views: usize,
    pub radius: f64,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self { seed: 0, scene: "toy".into(), size: 100, views: 16, radius: TOY_RADIUS }
    }
}

pub fn generate(a: &GenerateArgs, threads: usize) -> Result<(), CliError> {
    let mut s: GenerateSettings = load_settings(a.common.config.as_deref())?;
    set(&mut s.seed, a.common.seed);
    set(&mut s.scene, a.scene.clone());
    set(&mut s.size, a.size);
    set(&mut s.views, a.views);
    set(&mut s.radius, a.radius);
    if s.views == 0 || !(s.radius > 0.0) {
        return Err(invalid("need at least one view and a positive radius"));
    }
    let scene = resolve(Some(&s.scene), None, None, Some(s.size))?;
    let mut run = RunDir::create(&a.common.out, "generate", s.seed, threads, &s)?;
    let frames: Vec<Frame<f64>> = hemisphere_poses::<f64>(s.views, s.radius)
        .into_iter()
        .enumerate()
        .map(|(i, pose)| Frame {
            image: render_image(scene.field.as_ref(), &scene.camera, &pose, &scene.spec.render, s.seed.wrapping_add(i as u64)),
            pose,
        })
        .collect();
    write_dataset(&run.dir, &scene.camera, &frames).map_err(CliError::other)?;
    (0..frames.len()).for_each(|i| run.record(format!("r_{i:03}.png")));
    run.record("transforms.json");
    run.write("scene.json", to_json(&scene.spec))?;
    println!("wrote {} views to {}", frames.len(), run.dir.display());
    run.finish("ok")
}

pub fn train(a: &TrainArgs, threads: usize) -> Result<(), CliError> {
    let mut c: TrainConfig = load_settings(a.common.config.as_deref())?;
    set(&mut c.seed, a.common.seed);
    set(&mut c.iterations, a.iterations);
    set(&mut c.batch_rays, a.batch_rays);
    set(&mut c.lr, a.lr);
    set(&mut c.render.n_samples, a.samples);
    c.validate().map_err(invalid)?;
    let (camera, frames) = read_dataset::<f32>(&a.data).map_err(|e| CliError::load(&a.data, e))?;
    let dataset = PosedDataset::new(camera, frames);
    dataset.validate().map_err(invalid)?;
    let mut run = RunDir::create(&a.common.out, "train", c.seed, threads, &c)?;
    let outcome = train_field(&dataset, &c).map_err(CliError::other)?;
    outcome.field.save(&run.path("field.nrf")).map_err(CliError::other)?;
    run.record("field.nrf");
    let mut csv = String::from("iteration,loss\n");
    outcome.losses.iter().enumerate().for_each(|(i, l)| csv.push_str(&format!("{i},{l}\n")));
    run.write("losses.csv", csv)?;
    let eval_render = radiance_pose::RenderConfig { stratified: false, ..c.render.cast::<f32>() };
    let psnr = evaluate_psnr(&outcome.field, &dataset.camera, &dataset.frames, &eval_render).map_err(CliError::other)?;
    run.write("metrics.json", to_json(&serde_json::json!({ "train_psnr": psnr, "final_loss": outcome.losses.last() })))?;
    println!("training-view PSNR {psnr:.2} dB");
    run.finish("ok")
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateSettings {
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub render_every: Option<usize>,
}

pub fn estimate(a: &EstimateArgs, threads: usize) -> Result<(), CliError> {
    let mut s: EstimateSettings = load_settings(a.common.config.as_deref())?;
    set(&mut s.seed, a.common.seed);
    apply_estimator_flags(&mut s.estimator, &a.estimator);
    if a.render_every.is_some() {
        s.render_every = a.render_every;
    }
    if s.render_every == Some(0) {
        return Err(invalid("--render-every must be at least 1"));
    }
    let scene = load_scene(&a.scene)?;
    s.estimator.render = scene.spec.render;
    s.estimator.validate().map_err(invalid)?;
    let observed = Image::<f64>::load_png(&a.image).map_err(|e| CliError::load(&a.image, e))?;
    if (observed.width(), observed.height()) != (scene.camera.width, scene.camera.height) {
        return Err(invalid(format!(
            "image is {}x{} but the camera is {}x{}",
            observed.width(),
            observed.height(),
            scene.camera.width,
            scene.camera.height
        )));
    }
    let initial = read_pose(&a.init_pose)?;
    let truth = a.truth_pose.as_deref().map(read_pose).transpose()?;

    let mut run = RunDir::create(&a.common.out, "estimate", s.seed, threads, &s)?;
    let sampler = RaySampler::new(observed, s.estimator.strategy, s.estimator.dilation()).map_err(invalid)?;
    if a.save_mask {
        match sampler.mask() {
            Some(mask) => {
                mask.save_png(&run.path("mask.png")).map_err(CliError::other)?;
                run.record("mask.png");
            }
            None => eprintln!("note: no mask for the {} strategy", sampler.strategy()),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let (trajectory, outcome) = match estimate_with_sampler(scene.field.as_ref(), &scene.camera, &sampler, &initial, &s.estimator, &mut rng)
    {
        Ok(r) => (r.trajectory, Ok(r.pose)),
        Err(EstimateError::Diverged { step, trajectory }) => (*trajectory, Err(CliError::Diverged { step })),
        Err(e) => return Err(invalid(e)),
    };
    run.write("trajectory.csv", trajectory.to_csv(truth.as_ref()))?;
    if let Some(every) = s.render_every {
        let last = trajectory.steps_run();
        let steps: BTreeSet<usize> = (0..=last).step_by(every).chain([last]).collect();
        for step in steps {
            if let Some(pose) = trajectory.pose_at(step) {
                let image = render_image(scene.field.as_ref(), &scene.camera, &pose, &scene.spec.render, 0);
                let name = format!("renders/step_{step:04}.png");
                std::fs::create_dir_all(run.path("renders")).map_err(CliError::other)?;
                image.save_png(&run.path(&name)).map_err(CliError::other)?;
                run.record(name);
            }
        }
    }
    match outcome {
        Ok(pose) => {
            run.write("pose.json", to_json(&pose))?;
            if let Some(t) = &truth {
                let e = pose_errors(&pose, t);
                println!("rotation error {:.4}°, translation error {:.5}", e.rotation_deg, e.translation);
            }
            run.finish("ok")
        }
        Err(e) => {
            run.finish("diverged")?;
            Err(e)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSettings {
    pub seed: u64,
    pub trials: usize,
    pub views: usize,
    pub radius: f64,
    pub rot_limit_deg: f64,
    pub trans_limit: f64,
    pub bench: BenchConfig,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self { seed: 0, trials: 20, views: 8, radius: TOY_RADIUS, rot_limit_deg: 20.0, trans_limit: 0.1, bench: BenchConfig::default() }
    }
}

pub fn benchmark(a: &BenchmarkArgs, threads: usize) -> Result<(), CliError> {
    let mut s: BenchmarkSettings = load_settings(a.common.config.as_deref())?;
    set(&mut s.seed, a.common.seed);
    set(&mut s.trials, a.trials);
    set(&mut s.views, a.views);
    set(&mut s.rot_limit_deg, a.rot_limit);
    set(&mut s.trans_limit, a.trans_limit);
    set(&mut s.bench.log_every, a.log_every);
    apply_estimator_flags(&mut s.bench.estimator, &a.estimator);
    if s.trials == 0 || s.views == 0 {
        return Err(invalid("need at least one trial and one view"));
    }
    let scene = load_scene(&a.scene)?;
    s.bench.estimator.render = scene.spec.render;
    let mut store: FieldStore<f64> = FieldStore::new();
    store.insert("scene".into(), SceneEntry { field: scene.field.clone(), camera: scene.camera, render: scene.spec.render });
    let truths = hemisphere_poses::<f64>(s.views, s.radius);
    let e = &s.bench.estimator;
    let specs = trial_specs("scene", &truths, s.trials, (s.rot_limit_deg, s.trans_limit), e.strategy, e.batch_size, s.seed);
    let mut run = RunDir::create(&a.common.out, "benchmark", s.seed, threads, &s)?;
    let report = run_benchmark(&specs, &store, &s.bench).map_err(invalid)?;
    run.write("report.json", report.to_json() + "\n")?;
    run.write("report.csv", report.to_csv())?;
    println!("joint success {:.1}% after {} steps", 100.0 * report.final_success(), s.bench.estimator.max_steps);
    run.finish("ok")
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfsupSettings {
    pub seed: u64,
    /// Index lists; all three default to the 16-view toy split.
    pub labeled: Option<Vec<usize>>,
    pub unlabeled: Option<Vec<usize>>,
    pub eval: Option<Vec<usize>>,
    pub selfsup: SelfSupConfig,
}

pub fn selfsup(a: &SelfsupArgs, threads: usize) -> Result<(), CliError> {
    let mut s: SelfsupSettings = load_settings(a.common.config.as_deref())?;
    set(&mut s.seed, a.common.seed);
    s.selfsup.train.seed = s.seed;
    set(&mut s.selfsup.train.iterations, a.iterations);
    set(&mut s.selfsup.train.batch_rays, a.batch_rays);
    apply_estimator_flags(&mut s.selfsup.estimator, &a.estimator);
    for (slot, flag) in [(&mut s.labeled, &a.labeled), (&mut s.unlabeled, &a.unlabeled), (&mut s.eval, &a.eval)] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    let (camera, frames) = read_dataset::<f32>(&a.data).map_err(|e| CliError::load(&a.data, e))?;
    let split = toy_split();
    let labeled = s.labeled.clone().unwrap_or(split.labeled);
    let unlabeled = s.unlabeled.clone().unwrap_or(split.unlabeled);
    let eval = s.eval.clone().unwrap_or(split.eval);
    let all: Vec<usize> = labeled.iter().chain(&unlabeled).chain(&eval).copied().collect();
    if let Some(&i) = all.iter().find(|&&i| i >= frames.len()) {
        return Err(invalid(format!("frame index {i} out of range (dataset has {} frames)", frames.len())));
    }
    if all.iter().collect::<BTreeSet<_>>().len() != all.len() {
        return Err(invalid("labeled, unlabeled and eval indices must be distinct"));
    }
    s.selfsup.train.validate().map_err(invalid)?;
    s.selfsup.estimator.validate().map_err(invalid)?;

    let pick = |ids: &[usize]| ids.iter().map(|&i| frames[i].clone()).collect::<Vec<_>>();
    let labeled_set = PosedDataset::new(camera, pick(&labeled));
    labeled_set.validate().map_err(invalid)?;
    let unlabeled_frames = pick(&unlabeled);
    let images: Vec<Image<f32>> = unlabeled_frames.iter().map(|f| f.image.clone()).collect();
    let truth = EvalData { frames: pick(&eval), unlabeled_poses: Some(unlabeled_frames.iter().map(|f| f.pose).collect()) };

    let mut run = RunDir::create(&a.common.out, "selfsup", s.seed, threads, &s)?;
    let outcome = self_supervise(&labeled_set, &images, &s.selfsup, Some(&truth)).map_err(CliError::other)?;
    outcome.labeled_field.save(&run.path("field_labeled.nrf")).map_err(CliError::other)?;
    run.record("field_labeled.nrf");
    outcome.semi_field.save(&run.path("field_semi.nrf")).map_err(CliError::other)?;
    run.record("field_semi.nrf");
    let poses: Vec<(usize, Pose<f32>)> = unlabeled.iter().copied().zip(outcome.estimated_poses.iter().copied()).collect();
    run.write("poses.json", to_json(&poses))?;
    run.write("report.json", to_json(&outcome.report))?;
    let r = &outcome.report;
    let show = |p: Option<f64>| p.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
    println!("PSNR labeled {} / with estimated poses {} / fully labeled {}", show(r.psnr_labeled), show(r.psnr_semi), show(r.psnr_full));
    run.finish("ok")
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub seed: u64,
    pub samples: Option<usize>,
}

pub fn render(a: &RenderArgs, threads: usize) -> Result<(), CliError> {
    let mut s: RenderSettings = load_settings(a.common.config.as_deref())?;
    set(&mut s.seed, a.common.seed);
    if a.samples.is_some() {
        s.samples = a.samples;
    }
    let scene = load_scene(&a.scene)?;
    let mut cfg = scene.spec.render;
    set(&mut cfg.n_samples, s.samples);
    if cfg.n_samples == 0 {
        return Err(invalid("need at least one sample per ray"));
    }
    let pose = read_pose(&a.pose)?;
    let mut run = RunDir::create(&a.common.out, "render", s.seed, threads, &s)?;
    let image = render_image(scene.field.as_ref(), &scene.camera, &pose, &cfg, s.seed);
    image.save_png(&run.path("render.png")).map_err(CliError::other)?;
    run.record("render.png");
    run.finish("ok")
}
