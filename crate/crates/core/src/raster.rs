//! Linear RGB float images and their 8-bit PNG encoding.

use std::path::Path;

use thiserror::Error;

use crate::linalg::Vec3;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major RGB image with channels nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    pixels: Vec<Vec3<T>>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize, fill: Vec3<T>) -> Self {
        Self { width, height, pixels: vec![fill; width * height] }
    }

    /// `f(u, v)` for column `u`, row `v`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Vec3<T>) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                pixels.push(f(u, v));
            }
        }
        Self { width, height, pixels }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Vec3<T>>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match dimensions");
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Vec3<T>] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Vec3<T> {
        self.pixels[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: Vec3<T>) {
        self.pixels[v * self.width + u] = c;
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image { width: self.width, height: self.height, pixels: self.pixels.iter().map(|p| p.cast()).collect() }
    }

    /// Mean squared error over all channels.
    pub fn mse(&self, other: &Self) -> Result<f64, ImageError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(ImageError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        let sum: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a.cast::<f64>() - b.cast::<f64>()).norm_squared()).sum();
        Ok(sum / (3 * self.pixels.len()).max(1) as f64)
    }

    /// Clamps to [0, 1] and quantizes each channel by `round(255 v)`.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let q = |v: T| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |u, v| {
            let p = self.get(u as usize, v as usize);
            image::Rgb([q(p.x), q(p.y), q(p.z)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let s = T::lit(1.0 / 255.0);
        Self::from_fn(img.width() as usize, img.height() as usize, |u, v| {
            let p = img.get_pixel(u as u32, v as u32).0;
            Vec3::new(T::lit(p[0] as f64), T::lit(p[1] as f64), T::lit(p[2] as f64)) * s
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|source| ImageError::Codec { path: path.display().to_string(), source })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_clamps_and_rounds() {
        let img = Image::from_pixels(3, 1, vec![Vec3::new(-0.5, 0.5, 1.5), Vec3::new(0.002, 0.998, 1.0), Vec3::zero()]);
        let q = img.to_rgb8();
        assert_eq!(q.get_pixel(0, 0).0, [0, 128, 255]);
        assert_eq!(q.get_pixel(1, 0).0, [1, 254, 255]);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::<f64>::from_fn(5, 4, |u, v| Vec3::new(u as f64 / 4.0, v as f64 / 3.0, 0.5));
        img.save_png(&path).unwrap();
        let back = Image::<f64>::load_png(&path).unwrap();
        assert_eq!((back.width(), back.height()), (5, 4));
        assert!(img.mse(&back).unwrap() < (0.5f64 / 255.0).powi(2));
    }

    #[test]
    fn mse_dimension_mismatch() {
        let a = Image::<f32>::new(2, 2, Vec3::zero());
        let b = Image::<f32>::new(2, 3, Vec3::zero());
        assert!(a.mse(&b).is_err());
    }
}
