//! Bundled toy scene, view layouts and the on-disk dataset format
//! (`transforms.json` plus one PNG per frame).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{AnalyticScene, Primitive, Shape};
use crate::linalg::Vec3;
use crate::raster::{Image, ImageError};
use crate::render::{Camera, RenderConfig, RenderError};
use crate::scalar::Real;
use crate::se3::{look_at, Pose, Se3Error};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Camera(#[from] RenderError),
    #[error(transparent)]
    Pose(#[from] Se3Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Distance of the toy cameras from the origin.
pub const TOY_RADIUS: f64 = 4.0;
/// Horizontal field of view of the toy camera, radians.
pub const TOY_FOV_X: f64 = 0.6;

/// A few colored spheres and boxes inside the unit ball around the origin.
pub fn toy_scene() -> AnalyticScene<f64> {
    let prim = |shape, c: [f64; 3], albedo: [f64; 3]| Primitive {
        shape,
        center: Vec3::from_array(c),
        shell_width: 0.08,
        peak_density: 40.0,
        albedo: Vec3::from_array(albedo),
    };
    let cube = |h: [f64; 3]| Shape::Box { half_extents: Vec3::from_array(h) };
    AnalyticScene::new(vec![
        prim(cube([0.55, 0.55, 0.12]), [0.0, 0.0, -0.2], [0.15, 0.3, 0.8]),
        prim(Shape::Sphere { radius: 0.25 }, [0.28, 0.25, 0.17], [0.9, 0.15, 0.1]),
        prim(cube([0.17, 0.17, 0.2]), [-0.3, -0.22, 0.12], [0.1, 0.75, 0.2]),
        prim(Shape::Sphere { radius: 0.15 }, [-0.25, 0.33, 0.05], [0.95, 0.85, 0.1]),
        prim(cube([0.1, 0.13, 0.28]), [0.33, -0.3, 0.2], [0.95, 0.5, 0.05]),
    ])
    .with_view_tint(0.2)
}

/// Square camera for the toy scene, bracketing the unit ball seen from [`TOY_RADIUS`].
pub fn toy_camera<T: Real>(size: usize) -> Camera<T> {
    Camera::from_fov_x(size, size, T::lit(TOY_FOV_X), T::lit(TOY_RADIUS - 1.0), T::lit(TOY_RADIUS + 1.0)).expect("valid toy camera")
}

/// Render settings used with the toy scene.
pub fn toy_render_config<T: Real>() -> RenderConfig<T> {
    RenderConfig { n_samples: 48, stratified: false, background: Vec3::new(T::one(), T::one(), T::one()) }
}

/// `n` cameras at distance `radius` looking at the origin (z up), along a
/// spiral whose azimuth advances `360°/n` per view and whose elevation climbs
/// from 15° to 60°.
pub fn hemisphere_poses<T: Real>(n: usize, radius: f64) -> Vec<Pose<T>> {
    (0..n)
        .map(|i| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let azimuth = std::f64::consts::TAU * i as f64 / n as f64;
            let elevation = (15.0 + 45.0 * frac).to_radians();
            let eye = Vec3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin()) * radius;
            look_at(eye.cast(), Vec3::zero(), Vec3::new(T::zero(), T::zero(), T::one())).expect("eye is never vertical")
        })
        .collect()
}

/// Index split of the 16-view toy layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub eval: Vec<usize>,
}

/// 4 labeled views (every fourth index), each followed by one unlabeled view
/// and one held-out view. The rest are unused.
pub fn toy_split() -> ViewSplit {
    ViewSplit { labeled: vec![0, 4, 8, 12], unlabeled: vec![1, 5, 9, 13], eval: vec![2, 6, 10, 14] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

/// Contents of `transforms.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    pub image: Image<T>,
    pub pose: Pose<T>,
}

/// Writes `r_000.png, r_001.png, …` and `transforms.json` into `dir`.
pub fn write_dataset<T: Real>(dir: &Path, camera: &Camera<T>, frames: &[Frame<T>]) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let stem = format!("r_{i:03}");
        f.image.save_png(&dir.join(format!("{stem}.png")))?;
        records.push(FrameRecord { file_path: format!("./{stem}"), transform_matrix: f.pose.cast::<f64>().to_matrix() });
    }
    let transforms = Transforms {
        camera_angle_x: camera.camera_angle_x().to_f64_lossy(),
        w: Some(camera.width),
        h: Some(camera.height),
        near: Some(camera.near.to_f64_lossy()),
        far: Some(camera.far.to_f64_lossy()),
        frames: records,
    };
    let path = dir.join("transforms.json");
    let text = serde_json::to_string_pretty(&transforms).expect("plain data serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a dataset written by [`write_dataset`] (or any NeRF-synthetic style
/// directory). Missing `near`/`far` default to 2 and 6; image size comes from
/// the first frame when `w`/`h` are absent.
pub fn read_dataset<T: Real>(dir: &Path) -> Result<(Camera<T>, Vec<Frame<T>>), DatasetError> {
    let path = dir.join("transforms.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let t: Transforms =
        serde_json::from_str(&text).map_err(|e| DatasetError::Format { path: path.display().to_string(), message: e.to_string() })?;
    let mut frames = Vec::with_capacity(t.frames.len());
    for rec in &t.frames {
        let mut file = dir.join(rec.file_path.trim_start_matches("./"));
        if file.extension().is_none() {
            file.set_extension("png");
        }
        let image = Image::load_png(&file)?;
        let m = rec.transform_matrix.map(|row| row.map(T::lit));
        frames.push(Frame { image, pose: Pose::from_matrix(&m)? });
    }
    let (w, h) = match (t.w, t.h, frames.first()) {
        (Some(w), Some(h), _) => (w, h),
        (_, _, Some(f)) => (f.image.width(), f.image.height()),
        _ => {
            return Err(DatasetError::Format { path: path.display().to_string(), message: "no frames and no image size".into() });
        }
    };
    if let Some(f) = frames.iter().find(|f| f.image.width() != w || f.image.height() != h) {
        return Err(DatasetError::Format {
            path: path.display().to_string(),
            message: format!("frame is {}x{}, expected {w}x{h}", f.image.width(), f.image.height()),
        });
    }
    let camera = Camera::from_fov_x(w, h, T::lit(t.camera_angle_x), T::lit(t.near.unwrap_or(2.0)), T::lit(t.far.unwrap_or(6.0)))?;
    Ok((camera, frames))
}
