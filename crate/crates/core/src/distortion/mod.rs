//! Four-coefficient polynomial radial distortion.
//!
//! Radii are in pixels from the image center. A fisheye pixel at radius `r_d`
//! shows the scene point that an undistorted camera would place at
//! `r_u = (1 + k1 r_d² + k2 r_d⁴ + k3 r_d⁶ + k4 r_d⁸) · r_d`.

mod deo;

pub use deo::{
    deo_mask, deo_ordering_report, DeoInterval, DeoMask, DeoOrder, DeoOrderCheck, DeoOrderingReport, DeoSpec,
    DEFAULT_CANVAS_RADIUS,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Decimal exponent bounds `(lo, hi)` of each coefficient's legal range.
pub const RANGE_EXPONENTS: [(i32, i32); 4] = [(-6, -4), (-11, -9), (-16, -14), (-21, -19)];

pub fn coefficient_range(order: usize) -> (f64, f64) {
    let (lo, hi) = RANGE_EXPONENTS[order - 1];
    (10f64.powi(lo), 10f64.powi(hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionParams {
    pub k: [f64; 4],
}

impl DistortionParams {
    /// Parameters within the legal ranges.
    pub fn new(k: [f64; 4]) -> Result<Self> {
        let p = Self { k };
        if !p.is_legal() {
            return Err(Error::domain(format!(
                "coefficients {k:?} outside the legal ranges {RANGE_EXPONENTS:?} (decimal exponents)"
            )));
        }
        Ok(p)
    }

    /// Any finite coefficients, e.g. zero for the identity or a single order
    /// in isolation.
    pub fn unchecked(k: [f64; 4]) -> Self {
        Self { k }
    }

    pub fn identity() -> Self {
        Self { k: [0.0; 4] }
    }

    pub fn is_legal(&self) -> bool {
        self.k.iter().enumerate().all(|(i, &k)| {
            let (lo, hi) = coefficient_range(i + 1);
            // Tolerate the rounding of a normalized round trip at the ends.
            k >= lo * (1.0 - 1e-12) && k <= hi * (1.0 + 1e-12)
        })
    }

    pub fn is_nonnegative(&self) -> bool {
        self.k.iter().all(|&k| k >= 0.0 && k.is_finite())
    }

    fn require_nonnegative(&self) -> Result<()> {
        if self.is_nonnegative() {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "coefficients {:?} are not all nonnegative; the radial map may not be monotone",
                self.k
            )))
        }
    }

    /// `p_i = (log10 k_i − lo_i) / (hi_i − lo_i)`.
    pub fn normalized(&self) -> Result<[f64; 4]> {
        let mut p = [0.0; 4];
        for (i, &k) in self.k.iter().enumerate() {
            if k <= 0.0 || !k.is_finite() {
                return Err(Error::domain(format!(
                    "k{} = {k} has no log-space normalization",
                    i + 1
                )));
            }
            let (lo, hi) = RANGE_EXPONENTS[i];
            p[i] = (k.log10() - lo as f64) / (hi - lo) as f64;
        }
        Ok(p)
    }

    pub fn from_normalized(p: [f64; 4]) -> Self {
        let mut k = [0.0; 4];
        for i in 0..4 {
            let (lo, hi) = RANGE_EXPONENTS[i];
            k[i] = 10f64.powf(lo as f64 + (hi - lo) as f64 * p[i]);
        }
        Self { k }
    }

    /// `r_u` for a fisheye radius `r_d`.
    pub fn distort_radius(&self, r_d: f64) -> Result<f64> {
        if !(r_d >= 0.0) {
            return Err(Error::domain(format!("radius must be nonnegative, got {r_d}")));
        }
        Ok(self.distort_unchecked(r_d))
    }

    #[inline]
    pub(crate) fn distort_unchecked(&self, r: f64) -> f64 {
        let [k1, k2, k3, k4] = self.k;
        let r2 = r * r;
        (1.0 + r2 * (k1 + r2 * (k2 + r2 * (k3 + r2 * k4)))) * r
    }

    /// `d r_u / d r_d`.
    #[inline]
    pub fn distort_derivative(&self, r: f64) -> f64 {
        let [k1, k2, k3, k4] = self.k;
        let r2 = r * r;
        1.0 + r2 * (3.0 * k1 + r2 * (5.0 * k2 + r2 * (7.0 * k3 + r2 * 9.0 * k4)))
    }

    /// Fisheye radius `r_d` whose distorted radius is `r_u`, by bisection.
    pub fn invert_radius(&self, r_u: f64) -> Result<f64> {
        self.require_nonnegative()?;
        if !(r_u >= 0.0) || !r_u.is_finite() {
            return Err(Error::domain(format!("radius must be nonnegative, got {r_u}")));
        }
        Ok(self.invert_unchecked(r_u))
    }

    pub(crate) fn invert_unchecked(&self, r_u: f64) -> f64 {
        // distort(r) ≥ r for nonnegative k, so the root lies in [0, r_u].
        let (mut lo, mut hi) = (0.0, r_u);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.distort_unchecked(mid) < r_u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn inverse_lut(&self, max_r_u: f64) -> Result<InverseLut> {
        InverseLut::new(self, max_r_u)
    }
}

/// Linear-interpolation table of `r_d(r_u)` on `[0, max_r_u]`.
#[derive(Clone, Debug)]
pub struct InverseLut {
    step: f64,
    values: Vec<f64>,
}

impl InverseLut {
    pub const ENTRIES: usize = 4096;

    pub fn new(params: &DistortionParams, max_r_u: f64) -> Result<Self> {
        params.require_nonnegative()?;
        if !(max_r_u > 0.0) || !max_r_u.is_finite() {
            return Err(Error::domain(format!("table extent must be positive, got {max_r_u}")));
        }
        let step = max_r_u / (Self::ENTRIES - 1) as f64;
        let values = (0..Self::ENTRIES)
            .map(|i| params.invert_unchecked(i as f64 * step))
            .collect();
        Ok(Self { step, values })
    }

    /// Interpolated `r_d`; clamps beyond the table extent.
    pub fn lookup(&self, r_u: f64) -> f64 {
        let t = (r_u / self.step).max(0.0);
        let i = (t.floor() as usize).min(Self::ENTRIES - 2);
        let f = (t - i as f64).min(1.0);
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// Image frame with the distortion center fixed at the image center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialGeometry {
    pub width: usize,
    pub height: usize,
}

impl RadialGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("geometry needs positive width and height"));
        }
        Ok(Self { width, height })
    }

    pub fn square(size: usize) -> Self {
        Self {
            width: size,
            height: size,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Disk radius `min(w, h) / 2`.
    pub fn radius(&self) -> f64 {
        self.width.min(self.height) as f64 / 2.0
    }

    /// Offset of pixel `(x, y)`'s center from the image center.
    #[inline]
    pub fn offset(&self, x: usize, y: usize) -> (f64, f64) {
        let (cx, cy) = self.center();
        (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy)
    }

    #[inline]
    pub fn pixel_radius(&self, x: usize, y: usize) -> f64 {
        let (dx, dy) = self.offset(x, y);
        dx.hypot(dy)
    }

    /// Pixel centers strictly inside the disk, row-major.
    pub fn disk_mask(&self) -> Vec<bool> {
        let r = self.radius();
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.pixel_radius(x, y) < r)
            .collect()
    }

    /// Sampling coordinate (integer = pixel center) of the point at center
    /// offset `(dx, dy)`.
    #[inline]
    pub fn to_sample_coords(&self, dx: f64, dy: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        (cx + dx - 0.5, cy + dy - 0.5)
    }
}

/// Zeroes every pixel outside the geometry's disk.
pub fn apply_disk_mask(img: &mut Image) {
    let geom = RadialGeometry {
        width: img.width(),
        height: img.height(),
    };
    let mask = geom.disk_mask();
    let c = img.channels();
    for (px, &m) in img.data_mut().chunks_mut(c).zip(&mask) {
        if !m {
            px.fill(0.0);
        }
    }
}

/// A synthesized fisheye frame with its per-pixel validity.
#[derive(Clone, Debug)]
pub struct FisheyeImage {
    pub image: Image,
    pub valid: Vec<bool>,
}

/// Backward warp: each fisheye pixel at radius `r_d` pulls the source
/// (bilinear) at `r_u` along the same ray. Pixels outside the disk or whose
/// source radius exceeds `R` are black and invalid.
pub fn synthesize_fisheye(src: &Image, params: &DistortionParams, geometry: &RadialGeometry) -> Result<FisheyeImage> {
    if src.width() != src.height() {
        return Err(Error::contract(format!(
            "fisheye synthesis needs a square source, got {}x{}",
            src.width(),
            src.height()
        )));
    }
    if src.width() != geometry.width || src.height() != geometry.height {
        return Err(Error::contract(format!(
            "source is {}x{} but geometry is {}x{}",
            src.width(),
            src.height(),
            geometry.width,
            geometry.height
        )));
    }
    params.require_nonnegative()?;
    let radius = geometry.radius();
    let c = src.channels();
    let mut out = Image::zeros(src.width(), src.height(), c);
    let mut valid = vec![false; src.width() * src.height()];
    let mut px = vec![0.0f32; c];
    for y in 0..geometry.height {
        for x in 0..geometry.width {
            let (dx, dy) = geometry.offset(x, y);
            let r_d = dx.hypot(dy);
            if r_d >= radius {
                continue;
            }
            let r_u = params.distort_unchecked(r_d);
            if r_u > radius {
                continue;
            }
            let s = if r_d > 0.0 { r_u / r_d } else { 1.0 };
            let (sx, sy) = geometry.to_sample_coords(dx * s, dy * s);
            if src.sample_bilinear(sx, sy, &mut px) {
                out.pixel_mut(x, y).copy_from_slice(&px);
                valid[y * geometry.width + x] = true;
            }
        }
    }
    Ok(FisheyeImage { image: out, valid })
}

/// Per-pixel displacement magnitude `|r_u − r_d|` over the disk (zero outside).
#[derive(Clone, Debug, Serialize)]
pub struct DistortionDistributionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl DistortionDistributionMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Grayscale PNG scaled so the maximum maps to white.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let scale = if self.max > 0.0 { 1.0 / self.max } else { 0.0 };
        let img = Image::new(
            self.width,
            self.height,
            1,
            self.values.iter().map(|&v| (v * scale) as f32).collect(),
        )?;
        img.save_png(path)
    }
}

pub fn compute_ddm(params: &DistortionParams, geometry: &RadialGeometry) -> Result<DistortionDistributionMap> {
    params.require_nonnegative()?;
    let radius = geometry.radius();
    let mut values = Vec::with_capacity(geometry.width * geometry.height);
    let (mut min, mut max) = (f64::INFINITY, 0.0f64);
    for y in 0..geometry.height {
        for x in 0..geometry.width {
            let r = geometry.pixel_radius(x, y);
            if r < radius {
                let v = (params.distort_unchecked(r) - r).abs();
                min = min.min(v);
                max = max.max(v);
                values.push(v);
            } else {
                values.push(0.0);
            }
        }
    }
    if !min.is_finite() {
        min = 0.0;
    }
    Ok(DistortionDistributionMap {
        width: geometry.width,
        height: geometry.height,
        values,
        min,
        max,
    })
}
