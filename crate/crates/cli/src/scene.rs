use std::path::{Path, PathBuf};
use std::sync::Arc;

use radiance_pose::field::{AnalyticScene, MlpField, RadianceField};
use radiance_pose::render::{Camera, RenderConfig};
use radiance_pose::scenes::{read_dataset, toy_camera, toy_render_config, toy_scene};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    /// The bundled toy scene.
    Toy,
    Analytic(AnalyticScene<f64>),
    /// Path to an `NRF1` file, relative to the scene file.
    Mlp(PathBuf),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub camera_angle_x: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraSpec {
    pub fn build(&self) -> Result<Camera<f64>, CliError> {
        Camera::from_fov_x(self.width, self.height, self.camera_angle_x, self.near, self.far).map_err(|e| CliError::Invalid(e.to_string()))
    }
}

impl From<&Camera<f64>> for CameraSpec {
    fn from(c: &Camera<f64>) -> Self {
        Self { width: c.width, height: c.height, camera_angle_x: c.camera_angle_x(), near: c.near, far: c.far }
    }
}

/// A field plus the camera and render settings it is observed with.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub field: FieldSource,
    pub camera: CameraSpec,
    #[serde(default = "toy_render_config")]
    pub render: RenderConfig<f64>,
}

impl SceneSpec {
    pub fn toy(size: usize) -> Self {
        Self { field: FieldSource::Toy, camera: CameraSpec::from(&toy_camera::<f64>(size)), render: toy_render_config() }
    }
}

pub struct LoadedScene {
    pub spec: SceneSpec,
    pub field: Arc<dyn RadianceField<f64>>,
    pub camera: Camera<f64>,
}

fn load_spec_file(path: &Path) -> Result<SceneSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::load(path, e))?;
    let mut spec: SceneSpec = serde_json::from_str(&text).map_err(|e| CliError::load(path, e))?;
    if let FieldSource::Mlp(p) = &mut spec.field {
        if p.is_relative() {
            *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
        }
    }
    Ok(spec)
}

/// Resolves `--scene` (`toy` or a spec file) or `--field` with the camera of `--data`.
pub fn resolve(scene: Option<&str>, field: Option<&Path>, data: Option<&Path>, size: Option<usize>) -> Result<LoadedScene, CliError> {
    let mut spec = match (scene, field) {
        (Some(_), Some(_)) => return Err(CliError::Invalid("give either --scene or --field, not both".into())),
        (Some("toy"), None) | (None, None) => SceneSpec::toy(size.unwrap_or(100)),
        (Some(path), None) => load_spec_file(Path::new(path))?,
        (None, Some(nrf)) => {
            let data = data.ok_or_else(|| CliError::Invalid("--field needs --data for the camera".into()))?;
            let (camera, _) = read_dataset::<f64>(data).map_err(|e| CliError::load(data, e))?;
            SceneSpec { field: FieldSource::Mlp(nrf.to_path_buf()), camera: CameraSpec::from(&camera), render: toy_render_config() }
        }
    };
    if let (Some(s), FieldSource::Toy) = (size, &spec.field) {
        spec.camera = CameraSpec::from(&toy_camera::<f64>(s));
    }
    let field: Arc<dyn RadianceField<f64>> = match &spec.field {
        FieldSource::Toy => Arc::new(toy_scene()),
        FieldSource::Analytic(s) => Arc::new(s.clone()),
        FieldSource::Mlp(p) => Arc::new(MlpField::<f64>::load(p).map_err(|e| CliError::load(p, e))?),
    };
    let camera = spec.camera.build()?;
    Ok(LoadedScene { spec, field, camera })
}
