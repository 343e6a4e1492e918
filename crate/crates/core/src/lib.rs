//! Camera pose estimation by inverting a differentiable radiance field.
//!
//! A pose hypothesis is parameterized by SE(3) exponential coordinates applied
//! on the left of an initial camera-to-world transform. Each step renders a
//! sparse batch of rays, compares them with the observed image and follows the
//! analytic gradient back to the six coordinates.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod bench;
pub mod estimator;
pub mod field;
pub mod linalg;
pub mod raster;
pub mod render;
pub mod sampler;
pub mod scalar;
pub mod scenes;
pub mod se3;
pub mod trainer;

pub use field::{AnalyticScene, FieldError, FieldOutput, MlpArchitecture, MlpField, RadianceField};
pub use linalg::{Mat3, Vec3};
pub use raster::Image;
pub use render::{Camera, Ray, RenderConfig};
pub use sampler::{PixelBatch, Strategy};
pub use scalar::Real;
pub use se3::{exp_se3, log_se3, pose_errors, ExpCoords, Pose, PoseError};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Pose64 = se3::Pose<f64>;
pub type Pose32 = se3::Pose<f32>;
pub type ExpCoords64 = se3::ExpCoords<f64>;
pub type ExpCoords32 = se3::ExpCoords<f32>;
pub type Vec3f64 = linalg::Vec3<f64>;
pub type Vec3f32 = linalg::Vec3<f32>;
pub type Camera64 = render::Camera<f64>;
pub type Camera32 = render::Camera<f32>;
pub type Image64 = raster::Image<f64>;
pub type Image32 = raster::Image<f32>;
pub type AnalyticScene64 = field::AnalyticScene<f64>;
pub type AnalyticScene32 = field::AnalyticScene<f32>;
pub type MlpField32 = field::MlpField<f32>;
pub type MlpField64 = field::MlpField<f64>;
