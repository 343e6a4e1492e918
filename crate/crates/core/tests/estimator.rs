mod common;

use common::{assert_close, v3};
use radiance_pose::estimator::{
    batch_loss, estimate_pose, init_estimate, loss_and_gradient, lr_schedule, photometric_loss, pose_step, Convergence, EstimateError,
    EstimatorConfig, LossMode,
};
use radiance_pose::field::{FieldGrads, FieldOutput, Primitive, Shape};
use radiance_pose::render::render_image;
use radiance_pose::sampler::RaySampler;
use radiance_pose::scenes::{hemisphere_poses, toy_camera, toy_render_config, toy_scene, TOY_RADIUS};
use radiance_pose::se3::{look_at, perturb_pose};
use radiance_pose::{exp_se3, pose_errors, AnalyticScene, Camera, ExpCoords, Mat3, PixelBatch, Pose, RadianceField, Strategy, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config(batch: usize) -> EstimatorConfig {
    EstimatorConfig { batch_size: batch, render: toy_render_config(), ..EstimatorConfig::default() }
}

#[test]
fn rgb_and_chroma_loss_examples() {
    let white = [v3(1.0, 1.0, 1.0)];
    let black = [v3(0.0, 0.0, 0.0)];
    let (l, g) = photometric_loss(&white, &white, LossMode::Rgb).unwrap();
    assert_eq!((l, g[0]), (0.0, Vec3::zero()));
    let (l, g) = photometric_loss(&white, &black, LossMode::Rgb).unwrap();
    assert_eq!(l, 3.0);
    assert_eq!(g[0], v3(2.0, 2.0, 2.0));
    let (l, _) = photometric_loss(&white, &black, LossMode::YuvUv).unwrap();
    assert!(l.abs() < 1e-8, "white and black share chroma, got {l}");
    assert!(matches!(photometric_loss(&white, &[], LossMode::Rgb), Err(EstimateError::InvalidArgument(_))));
}

#[test]
fn chroma_loss_matches_direct_evaluation() {
    let yuv = |c: Vec3<f64>| {
        let u = -0.09991 * c.x - 0.33609 * c.y + 0.436 * c.z;
        let v = 0.615 * c.x - 0.55861 * c.y - 0.05639 * c.z;
        (u, v)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rand_color = |rng: &mut ChaCha8Rng| v3(rng.random(), rng.random(), rng.random());
    let rendered: Vec<_> = (0..7).map(|_| rand_color(&mut rng)).collect();
    let observed: Vec<_> = (0..7).map(|_| rand_color(&mut rng)).collect();
    let loss = |r: &[Vec3<f64>]| {
        r.iter()
            .zip(&observed)
            .map(|(&a, &b)| {
                let ((ua, va), (ub, vb)) = (yuv(a), yuv(b));
                (ua - ub).powi(2) + (va - vb).powi(2)
            })
            .sum::<f64>()
            / 7.0
    };
    let (l, g) = photometric_loss(&rendered, &observed, LossMode::YuvUv).unwrap();
    assert!((l - loss(&rendered)).abs() < 1e-14);
    for i in 0..7 {
        for k in 0..3 {
            let fd = common::central_diff(
                |s| {
                    let mut r = rendered.clone();
                    let mut a = r[i].to_array();
                    a[k] += s;
                    r[i] = Vec3::from_array(a);
                    loss(&r)
                },
                0.0,
                1e-5,
            );
            assert_close("chroma gradient", g[i].to_array()[k], fd, 1e-6, 1e-10);
        }
    }
}

#[test]
fn schedule_examples() {
    assert_eq!(lr_schedule(0), 0.01);
    assert!((lr_schedule(100) - 0.008).abs() < 1e-15);
    assert!((lr_schedule(200) - 0.0064).abs() < 1e-15);
    assert!((lr_schedule(50) - 0.01 * 0.8f64.sqrt()).abs() < 1e-15);
}

#[test]
fn initialization_examples() {
    let base = hemisphere_poses::<f64>(4, 4.0)[1];
    let zero = init_estimate(&base, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(zero.coords, ExpCoords::zero());
    assert_eq!(zero.pose(), base);
    assert_eq!((zero.m, zero.v, zero.step), ([0.0; 6], [0.0; 6], 0));

    let a = init_estimate(&base, 1e-6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(a.coords.0.iter().all(|c| c.abs() < 1e-3) && a.coords != ExpCoords::zero());
    assert_eq!(a, init_estimate(&base, 1e-6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap());
    assert!(init_estimate(&base, -1.0, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(48);
    let truth = hemisphere_poses::<f64>(8, TOY_RADIUS)[2];
    let config = EstimatorConfig { init_std: 0.0, ..toy_config(256) };
    let observed = render_image(&scene, &cam, &truth, &config.render, 0);
    let sampler = RaySampler::new(observed, Strategy::InterestRegion, 3).unwrap();
    let mut est = init_estimate(&truth, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let loss = pose_step(&mut est, &scene, &cam, &sampler, &config, &mut rng).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(est.coords, ExpCoords::zero());
    assert_eq!(est.step, 1);
}

#[test]
fn coordinate_gradients_match_finite_differences() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(32);
    let render = toy_render_config::<f64>();
    let poses = hemisphere_poses::<f64>(20, TOY_RADIUS);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (case, truth) in poses.iter().enumerate() {
        let observed = render_image(&scene, &cam, truth, &render, 0);
        let base = perturb_pose(truth, 8.0, 0.05, &mut rng);
        let coords = ExpCoords(std::array::from_fn(|_| rng.random_range(-0.03..0.03)));
        let pixels: Vec<(usize, usize)> = (0..96).map(|_| (rng.random_range(4..28), rng.random_range(4..28))).collect();
        let colors = pixels.iter().map(|&(u, v)| observed.get(u, v)).collect();
        let batch = PixelBatch { pixels, colors };
        let mode = if case % 2 == 0 { LossMode::Rgb } else { LossMode::YuvUv };
        let (loss, grad) = loss_and_gradient(&scene, &cam, &base, &coords, &batch, mode, &render, 0).unwrap();
        let at = |xi: ExpCoords<f64>| batch_loss(&scene, &cam, &exp_se3(&xi).unwrap().compose(&base), &batch, mode, &render, 0).unwrap();
        assert_eq!(loss, at(coords));
        for k in 0..6 {
            let fd = common::central_diff(
                |s| {
                    let mut xi = coords;
                    xi.0[k] += s;
                    at(xi)
                },
                0.0,
                1e-6,
            );
            assert_close(&format!("case {case} coordinate {k}"), grad[k], fd, 1e-3, 1e-5);
        }
    }
}

#[test]
fn ground_truth_start_stays_put() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(48);
    let truth = hemisphere_poses::<f64>(8, TOY_RADIUS)[5];
    let config = toy_config(512);
    let observed = render_image(&scene, &cam, &truth, &config.render, 0);
    let run = estimate_pose(&scene, &cam, &observed, &truth, &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let e = pose_errors(&run.pose, &truth);
    assert!(e.rotation_deg < 0.1 && e.translation < 1e-3, "{e:?}");
}

#[test]
fn zero_steps_returns_the_initialized_pose() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(32);
    let start = hemisphere_poses::<f64>(8, TOY_RADIUS)[0];
    let observed = render_image(&scene, &cam, &start, &toy_render_config(), 0);
    let config = EstimatorConfig { max_steps: 0, ..toy_config(64) };
    let run = estimate_pose(&scene, &cam, &observed, &start, &config, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let init = init_estimate(&start, config.init_std, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(run.pose, init.pose());
    assert!(run.trajectory.entries.is_empty());
    assert_eq!(run.trajectory.final_pose, Some(run.pose));
}

#[test]
fn translated_start_improves_early() {
    // three spheres: a single one would leave rotations about its center unobservable
    let sphere = |c: [f64; 3], r: f64, albedo: [f64; 3]| Primitive {
        shape: Shape::Sphere { radius: r },
        center: Vec3::from_array(c),
        shell_width: 0.1,
        peak_density: 20.0,
        albedo: Vec3::from_array(albedo),
    };
    let scene = AnalyticScene::new(vec![
        sphere([0.0, 0.0, 0.0], 0.5, [1.0, 0.2, 0.1]),
        sphere([0.5, -0.4, 0.3], 0.25, [0.1, 0.3, 0.9]),
        sphere([-0.3, 0.5, -0.2], 0.3, [0.2, 0.8, 0.2]),
    ])
    .with_view_tint(0.3);
    let cam = Camera::from_fov_x(64, 64, 0.6, 2.0, 6.0).unwrap();
    let truth = look_at(v3(3.0, 2.0, 1.5), Vec3::zero(), v3(0.0, 0.0, 1.0)).unwrap();
    let start = Pose::from_translation(v3(0.05, 0.0, 0.0)).compose(&truth);
    let render = toy_render_config();
    let observed = render_image(&scene, &cam, &truth, &render, 0);
    let config = EstimatorConfig { max_steps: 50, render, ..toy_config(512) };
    let run = estimate_pose(&scene, &cam, &observed, &start, &config, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let score = |p: &Pose<f64>| {
        let e = pose_errors(p, &truth);
        e.rotation_deg.to_radians() + e.translation
    };
    let errors: Vec<f64> = run.trajectory.entries.iter().map(|e| score(&e.pose)).chain([score(&run.pose)]).collect();
    // least-squares slope of error against step
    let n = errors.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_e = errors.iter().sum::<f64>() / n;
    let slope = errors.iter().enumerate().map(|(t, e)| (t as f64 - mean_t) * (e - mean_e)).sum::<f64>()
        / errors.iter().enumerate().map(|(t, _)| (t as f64 - mean_t).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "error trend {slope:e} per step: {errors:?}");
    assert!(errors.last().unwrap() < &errors[0], "{errors:?}");
}

#[test]
fn trajectories_stay_on_the_manifold() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(48);
    let truth = hemisphere_poses::<f64>(8, TOY_RADIUS)[3];
    let observed = render_image(&scene, &cam, &truth, &toy_render_config(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let start = perturb_pose(&truth, 20.0, 0.1, &mut rng);
    let config = EstimatorConfig { max_steps: 80, ..toy_config(512) };
    let run = estimate_pose(&scene, &cam, &observed, &start, &config, &mut rng).unwrap();
    assert_eq!(run.trajectory.entries.len(), 80);
    for (i, e) in run.trajectory.entries.iter().enumerate() {
        assert_eq!(e.step, i);
        assert!(e.pose.is_valid() && e.loss.is_finite());
    }
    let csv = run.trajectory.to_csv(Some(&truth));
    assert_eq!(csv.lines().count(), 82);
    assert!(csv.starts_with("step,loss,w1,w2,w3,v1,v2,v3,rotation_error_deg,translation_error\n"));
}

#[test]
fn rotation_about_the_look_at_point_does_not_drift() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(64);
    let render = toy_render_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for truth in hemisphere_poses::<f64>(4, TOY_RADIUS) {
        let observed = render_image(&scene, &cam, &truth, &render, 0);
        // rotate the camera rig about the world origin, which the camera looks at
        let axis: Vec3<f64> = radiance_pose::se3::random_unit_vector(&mut rng);
        let offset = exp_se3(&ExpCoords::from_parts(axis * 8f64.to_radians(), Vec3::zero())).unwrap();
        let start = offset.compose(&truth);
        let initial = pose_errors(&start, &truth);
        let config = EstimatorConfig { max_steps: 150, ..toy_config(1024) };
        let run = estimate_pose(&scene, &cam, &observed, &start, &config, &mut rng).unwrap();
        for e in &run.trajectory.entries {
            let err = pose_errors(&e.pose, &truth);
            assert!(err.translation <= 1.5 * initial.translation, "step {}: {err:?} from {initial:?}", e.step);
        }
        let fin = pose_errors(&run.pose, &truth);
        assert!(fin.rotation_deg < initial.rotation_deg && fin.translation < initial.translation, "{fin:?} from {initial:?}");
    }
}

#[test]
fn convergence_can_stop_early() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(32);
    let truth = hemisphere_poses::<f64>(8, TOY_RADIUS)[1];
    let observed = render_image(&scene, &cam, &truth, &toy_render_config(), 0);
    let config =
        EstimatorConfig { max_steps: 300, init_std: 0.0, convergence: Some(Convergence { window: 5, tolerance: 1e-4 }), ..toy_config(64) };
    let run = estimate_pose(&scene, &cam, &observed, &truth, &config, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_eq!(run.trajectory.entries.len(), 10);
}

struct Poisoned;

impl RadianceField<f64> for Poisoned {
    fn eval(&self, _: Vec3<f64>, _: Vec3<f64>) -> FieldOutput<f64> {
        FieldOutput { density: f64::NAN, color: v3(0.5, 0.5, 0.5) }
    }

    fn eval_with_grads(&self, x: Vec3<f64>, d: Vec3<f64>) -> FieldGrads<f64> {
        FieldGrads { output: self.eval(x, d), d_density_dx: Vec3::zero(), d_color_dx: Mat3::zero(), d_color_dd: Mat3::zero() }
    }
}

#[test]
fn non_finite_losses_report_divergence() {
    let cam = toy_camera::<f64>(24);
    let observed = radiance_pose::Image::new(24, 24, v3(0.1, 0.2, 0.3));
    let config = toy_config(32);
    let start = hemisphere_poses::<f64>(2, TOY_RADIUS)[0];
    match estimate_pose(&Poisoned, &cam, &observed, &start, &config, &mut ChaCha8Rng::seed_from_u64(11)) {
        Err(EstimateError::Diverged { step, trajectory }) => {
            assert_eq!(step, 0);
            assert!(trajectory.entries.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(32);
    let start = hemisphere_poses::<f64>(2, TOY_RADIUS)[0];
    let wrong_size = radiance_pose::Image::new(31, 32, v3(1.0, 1.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    assert!(matches!(estimate_pose(&scene, &cam, &wrong_size, &start, &toy_config(8), &mut rng), Err(EstimateError::InvalidArgument(_))));
    let image = radiance_pose::Image::new(32, 32, v3(1.0, 1.0, 1.0));
    let bad = EstimatorConfig { batch_size: 0, ..toy_config(8) };
    assert!(estimate_pose(&scene, &cam, &image, &start, &bad, &mut rng).is_err());
    let bad = EstimatorConfig { lr0: 0.0, ..toy_config(8) };
    assert!(estimate_pose(&scene, &cam, &image, &start, &bad, &mut rng).is_err());
}

#[test]
fn recovers_most_perturbed_poses() {
    let scene = toy_scene();
    let cam = toy_camera::<f64>(100);
    let truths = hemisphere_poses::<f64>(20, TOY_RADIUS);
    let config = toy_config(2048);
    let mut successes = 0;
    for (i, truth) in truths.iter().take(10).enumerate() {
        let observed = render_image(&scene, &cam, truth, &config.render, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let start = perturb_pose(truth, 20.0, 0.1, &mut rng);
        let run = estimate_pose(&scene, &cam, &observed, &start, &config, &mut rng).unwrap();
        if pose_errors(&run.pose, truth).within(5.0, 0.05) {
            successes += 1;
        }
    }
    assert!(successes >= 8, "{successes} of 10 trials recovered");
}
