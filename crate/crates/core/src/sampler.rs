//! Choosing which pixels (rays) enter each optimization step.
//!
//! * `random`: uniform without replacement over the whole image.
//! * `interest_point`: uniform over Harris corners of the observed image.
//! * `interest_region`: uniform over the corners' mask after `I` rounds of 5×5
//!   dilation.
//!
//! Both interest strategies top up with random pixels when they run short of
//! candidates. Detection happens once per observed image, never on renders.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vec3;
use crate::raster::{Image, ImageError};
use crate::scalar::Real;

/// Harris sensitivity `k` in `det − k·tr²`.
pub const HARRIS_K: f64 = 0.04;
/// Responses below this fraction of the maximum are discarded.
pub const HARRIS_THRESHOLD: f64 = 0.01;
/// Detections are suppressed within this many pixels of the border, where the
/// 5×5 support of Sobel plus the 3×3 window would read clamped pixels.
const BORDER: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("ray budget {budget} exceeds the {pixels} available pixels")]
    BudgetTooLarge { budget: usize, pixels: usize },
    #[error("ray budget must be at least 1")]
    EmptyBudget,
    #[error("image must be at least 16x16 for interest point detection, got {0}x{1}")]
    ImageTooSmall(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    InterestPoint,
    InterestRegion,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "interest_point" | "point" => Ok(Self::InterestPoint),
            "interest_region" | "region" => Ok(Self::InterestRegion),
            other => Err(format!("unknown sampling strategy '{other}'")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::InterestPoint => "interest_point",
            Self::InterestRegion => "interest_region",
        })
    }
}

/// Dilation rounds used when none are given: 3 up to 1024 rays, 5 beyond.
pub fn default_dilation(budget: usize) -> usize {
    if budget <= 1024 {
        3
    } else {
        5
    }
}

/// Sampled pixel coordinates `(u, v)` with their observed colors.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch<T> {
    pub pixels: Vec<(usize, usize)>,
    pub colors: Vec<Vec3<T>>,
}

impl<T> PixelBatch<T> {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterestMask {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl InterestMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, cells: vec![false; width * height] }
    }

    pub fn from_points(width: usize, height: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::new(width, height);
        for &(u, v) in points {
            m.set(u, v, true);
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.cells[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.cells[v * self.width + u] = on;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_saturated(&self) -> bool {
        self.cells.iter().all(|&c| c)
    }

    /// Linear indices `v·W + u` of the set cells, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.cells.iter().enumerate().filter_map(|(i, &c)| c.then_some(i)).collect()
    }

    /// White where set.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let img = Image::<f32>::from_fn(self.width, self.height, |u, v| {
            let c = if self.get(u, v) { 1.0 } else { 0.0 };
            Vec3::new(c, c, c)
        });
        img.save_png(path)
    }
}

/// Each round sets a cell iff any cell of its 5×5 neighborhood (clipped at the
/// border) was set. Implemented as separable row and column maxima.
pub fn dilate_mask(mask: &InterestMask, iterations: usize) -> InterestMask {
    let (w, h) = (mask.width, mask.height);
    let mut cur = mask.cells.clone();
    let mut tmp = vec![false; cur.len()];
    for _ in 0..iterations {
        for v in 0..h {
            for u in 0..w {
                let lo = u.saturating_sub(2);
                let hi = (u + 2).min(w - 1);
                tmp[v * w + u] = (lo..=hi).any(|x| cur[v * w + x]);
            }
        }
        for v in 0..h {
            let lo = v.saturating_sub(2);
            let hi = (v + 2).min(h - 1);
            for u in 0..w {
                cur[v * w + u] = (lo..=hi).any(|y| tmp[y * w + u]);
            }
        }
    }
    InterestMask { width: w, height: h, cells: cur }
}

fn luminance<T: Real>(image: &Image<T>) -> Vec<f64> {
    image.pixels().iter().map(|p| 0.299 * p.x.to_f64_lossy() + 0.587 * p.y.to_f64_lossy() + 0.114 * p.z.to_f64_lossy()).collect()
}

/// Harris corner response `det(M) − k·tr(M)²` per pixel, `M` the 3×3-summed
/// structure tensor of Sobel gradients (borders clamped).
pub fn harris_response<T: Real>(image: &Image<T>) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let gray = luminance(image);
    let at = |u: isize, v: isize| -> f64 {
        let u = u.clamp(0, w as isize - 1) as usize;
        let v = v.clamp(0, h as isize - 1) as usize;
        gray[v * w + u]
    };
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for v in 0..h as isize {
        for u in 0..w as isize {
            // outer taps are paired first so a 90° rotation of the image
            // reproduces the same floating-point sums
            let gx =
                ((at(u + 1, v - 1) + at(u + 1, v + 1)) + 2.0 * at(u + 1, v)) - ((at(u - 1, v - 1) + at(u - 1, v + 1)) + 2.0 * at(u - 1, v));
            let gy =
                ((at(u - 1, v + 1) + at(u + 1, v + 1)) + 2.0 * at(u, v + 1)) - ((at(u - 1, v - 1) + at(u + 1, v - 1)) + 2.0 * at(u, v - 1));
            let i = v as usize * w + u as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    // summed in sorted order, which makes the result independent of orientation
    let window = |buf: &[f64], u: usize, v: usize| -> f64 {
        let mut vals = [0.0; 9];
        for (k, (du, dv)) in (-1isize..=1).flat_map(|dv| (-1isize..=1).map(move |du| (du, dv))).enumerate() {
            let uu = (u as isize + du).clamp(0, w as isize - 1) as usize;
            let vv = (v as isize + dv).clamp(0, h as isize - 1) as usize;
            vals[k] = buf[vv * w + uu];
        }
        vals.sort_unstable_by(f64::total_cmp);
        vals.iter().sum()
    };
    let mut response = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let (a, b, c) = (window(&ixx, u, v), window(&iyy, u, v), window(&ixy, u, v));
            response[v * w + u] = a * b - c * c - HARRIS_K * (a + b) * (a + b);
        }
    }
    response
}

/// Harris corners: local maxima over the 3×3 neighborhood with response above
/// `0.01 · max`, strongest first. A constant image yields no points.
pub fn detect_interest_points<T: Real>(image: &Image<T>) -> Result<Vec<(usize, usize)>, SamplerError> {
    let (w, h) = (image.width(), image.height());
    if w < 16 || h < 16 {
        return Err(SamplerError::ImageTooSmall(w, h));
    }
    let r = harris_response(image);
    let max = r.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let threshold = HARRIS_THRESHOLD * max;
    let mut found: Vec<(f64, usize, usize)> = Vec::new();
    for v in BORDER..h - BORDER {
        for u in BORDER..w - BORDER {
            let c = r[v * w + u];
            if c <= 0.0 || c < threshold {
                continue;
            }
            let is_max = (v - 1..=v + 1).all(|vv| (u - 1..=u + 1).all(|uu| r[vv * w + uu] <= c));
            if is_max {
                found.push((c, u, v));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    Ok(found.into_iter().map(|(_, u, v)| (u, v)).collect())
}

/// Per-image sampling state; interest points and the dilated mask are computed once.
#[derive(Clone, Debug)]
pub struct RaySampler<T> {
    image: Image<T>,
    strategy: Strategy,
    points: Vec<(usize, usize)>,
    mask: Option<InterestMask>,
    /// Linear indices of the strategy's candidate pixels (empty for random).
    candidates: Vec<usize>,
}

impl<T: Real> RaySampler<T> {
    pub fn new(image: Image<T>, strategy: Strategy, dilation_iters: usize) -> Result<Self, SamplerError> {
        let (w, h) = (image.width(), image.height());
        let (points, mask, candidates) = match strategy {
            Strategy::Random => (Vec::new(), None, Vec::new()),
            Strategy::InterestPoint => {
                let points = detect_interest_points(&image)?;
                let mut idx: Vec<usize> = points.iter().map(|&(u, v)| v * w + u).collect();
                idx.sort_unstable();
                (points, None, idx)
            }
            Strategy::InterestRegion => {
                let points = detect_interest_points(&image)?;
                let mask = dilate_mask(&InterestMask::from_points(w, h, &points), dilation_iters);
                let idx = mask.indices();
                (points, Some(mask), idx)
            }
        };
        Ok(Self { image, strategy, points, mask, candidates })
    }

    pub fn image(&self) -> &Image<T> {
        &self.image
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn interest_points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn mask(&self) -> Option<&InterestMask> {
        self.mask.as_ref()
    }

    /// Draws `budget` distinct pixels.
    pub fn sample<R: Rng + ?Sized>(&self, budget: usize, rng: &mut R) -> Result<PixelBatch<T>, SamplerError> {
        let (w, h) = (self.image.width(), self.image.height());
        let total = w * h;
        if budget == 0 {
            return Err(SamplerError::EmptyBudget);
        }
        if budget > total {
            return Err(SamplerError::BudgetTooLarge { budget, pixels: total });
        }
        let chosen: Vec<usize> = if self.strategy == Strategy::Random || self.candidates.is_empty() {
            index::sample(rng, total, budget).into_iter().collect()
        } else if self.candidates.len() >= budget {
            index::sample(rng, self.candidates.len(), budget).into_iter().map(|i| self.candidates[i]).collect()
        } else {
            // every candidate, then a random top-up from the rest of the image
            let mut taken = vec![false; total];
            for &c in &self.candidates {
                taken[c] = true;
            }
            let rest: Vec<usize> = (0..total).filter(|&i| !taken[i]).collect();
            let mut out = self.candidates.clone();
            out.extend(index::sample(rng, rest.len(), budget - self.candidates.len()).into_iter().map(|i| rest[i]));
            out
        };
        let pixels: Vec<(usize, usize)> = chosen.iter().map(|&i| (i % w, i / w)).collect();
        let colors = pixels.iter().map(|&(u, v)| self.image.get(u, v)).collect();
        Ok(PixelBatch { pixels, colors })
    }
}

/// One-shot convenience: detect, (dilate), and sample.
pub fn sample_batch<T: Real, R: Rng + ?Sized>(
    strategy: Strategy,
    image: &Image<T>,
    budget: usize,
    dilation_iters: usize,
    rng: &mut R,
) -> Result<PixelBatch<T>, SamplerError> {
    RaySampler::new(image.clone(), strategy, dilation_iters)?.sample(budget, rng)
}
