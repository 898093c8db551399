//! Undistorting a fisheye image given its coefficients.
//!
//! The user-facing path forward-splats every fisheye pixel to its undistorted
//! position and fills the resulting holes with a growing masked 5×5 moving
//! average. Training uses a backward warp instead: each output pixel solves
//! for its fisheye radius with Newton iterations recorded on the tape, so the
//! image loss reaches the predicted coefficients.

use std::sync::Arc;

use serde::Serialize;

use crate::autodiff::{Scalar, Tensor, Var};
use crate::distortion::{DistortionParams, RadialGeometry, RANGE_EXPONENTS};
use crate::error::{Error, Result};
use crate::image::Image;

pub const NEWTON_STEPS: usize = 8;
pub const NEWTON_TOLERANCE: f64 = 1e-3;
pub const FILL_RADIUS: usize = 2;

#[derive(Clone, Debug)]
pub struct PreCorrection {
    /// Splatted image with holes.
    pub ip: Image,
    /// Pixels written by the splat.
    pub mask: Vec<bool>,
    /// Moving-average fill source.
    pub ib: Image,
    /// `mask · ip + (1 − mask) · ib`.
    pub ic: Image,
    /// Pixels the fill must cover (the output disk).
    pub region: Vec<bool>,
    pub fill_passes: usize,
}

impl PreCorrection {
    pub fn hole_fraction(&self) -> f64 {
        let total = self.region.iter().filter(|&&r| r).count();
        let holes = self.region.iter().zip(&self.mask).filter(|(&r, &m)| r && !m).count();
        holes as f64 / total.max(1) as f64
    }
}

/// Writes each fisheye pixel at radius `r_d` to the nearest pixel at radius
/// `r_u` along the same ray, averaging collisions. Returns `(I_p, M)`.
pub fn precorrect_splat(
    fisheye: &Image,
    params: &DistortionParams,
    geometry: &RadialGeometry,
) -> Result<(Image, Vec<bool>)> {
    if !params.is_nonnegative() {
        return Err(Error::Unsupported(format!(
            "coefficients {:?} must be nonnegative",
            params.k
        )));
    }
    let (w, h, c) = (fisheye.width(), fisheye.height(), fisheye.channels());
    if w != geometry.width || h != geometry.height {
        return Err(Error::contract(format!(
            "image {w}x{h} does not match geometry {}x{}",
            geometry.width, geometry.height
        )));
    }
    let radius = geometry.radius();
    let disk = geometry.disk_mask();
    let mut sum = vec![0.0f64; w * h * c];
    let mut count = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = geometry.offset(x, y);
            let r_d = dx.hypot(dy);
            if r_d >= radius {
                continue;
            }
            let r_u = params.distort_unchecked(r_d);
            // Beyond the output disk the fisheye holds no source content.
            if r_u >= radius {
                continue;
            }
            let s = if r_d > 0.0 { r_u / r_d } else { 1.0 };
            let (tx, ty) = geometry.to_sample_coords(dx * s, dy * s);
            let (tx, ty) = (tx.round(), ty.round());
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            let t = ty as usize * w + tx as usize;
            if !disk[t] {
                continue;
            }
            count[t] += 1;
            for (ch, v) in fisheye.pixel(x, y).iter().enumerate() {
                sum[t * c + ch] += *v as f64;
            }
        }
    }
    let mut ip = Image::zeros(w, h, c);
    let mask: Vec<bool> = count.iter().map(|&n| n > 0).collect();
    for (t, &n) in count.iter().enumerate() {
        if n > 0 {
            for ch in 0..c {
                ip.data_mut()[t * c + ch] = (sum[t * c + ch] / n as f64) as f32;
            }
        }
    }
    Ok((ip, mask))
}

/// Masked box average of `img` over valid pixels in a `(2r+1)²` window.
fn masked_box(img: &Image, valid: &[bool], x: usize, y: usize, r: usize, out: &mut [f64]) -> usize {
    let (w, h) = (img.width(), img.height());
    out.fill(0.0);
    let mut n = 0;
    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
            if valid[yy * w + xx] {
                n += 1;
                for (o, v) in out.iter_mut().zip(img.pixel(xx, yy)) {
                    *o += *v as f64;
                }
            }
        }
    }
    if n > 0 {
        for o in out.iter_mut() {
            *o /= n as f64;
        }
    }
    n
}

/// Fills every hole inside `region` by repeated masked 5×5 averaging, each
/// pass using only values known before it, then composes `I_c`.
pub fn inpaint_moving_average(ip: &Image, mask: &[bool], region: &[bool]) -> Result<PreCorrection> {
    let (w, h, c) = (ip.width(), ip.height(), ip.channels());
    if mask.len() != w * h || region.len() != w * h {
        return Err(Error::contract("mask and region must match the image size"));
    }
    if !mask.iter().zip(region).any(|(&m, &r)| m && r) {
        return Err(Error::Degenerate("no valid pixel inside the target region".into()));
    }
    let mut ib = Image::zeros(w, h, c);
    let mut acc = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if region[i] && mask[i] && masked_box(ip, mask, x, y, FILL_RADIUS, &mut acc) > 0 {
                for (ch, v) in acc.iter().enumerate() {
                    ib.set(x, y, ch, *v as f32);
                }
            }
        }
    }
    let mut known = mask.to_vec();
    let mut filled = ip.clone();
    let mut passes = 0;
    loop {
        let holes: Vec<usize> = (0..w * h).filter(|&i| region[i] && !known[i]).collect();
        if holes.is_empty() {
            break;
        }
        passes += 1;
        let mut updates = Vec::new();
        for &i in &holes {
            let (x, y) = (i % w, i / w);
            if masked_box(&filled, &known, x, y, FILL_RADIUS, &mut acc) > 0 {
                updates.push((i, acc.clone()));
            }
        }
        if updates.is_empty() {
            return Err(Error::Degenerate(format!(
                "{} holes are unreachable from valid pixels",
                holes.len()
            )));
        }
        for (i, vals) in updates {
            known[i] = true;
            for (ch, v) in vals.iter().enumerate() {
                let v = *v as f32;
                filled.data_mut()[i * c + ch] = v;
                ib.data_mut()[i * c + ch] = v;
            }
        }
    }
    let mut ic = Image::zeros(w, h, c);
    for i in 0..w * h {
        let m = if mask[i] { 1.0f32 } else { 0.0 };
        for ch in 0..c {
            let k = i * c + ch;
            ic.data_mut()[k] = m * ip.data()[k] + (1.0 - m) * ib.data()[k];
        }
    }
    Ok(PreCorrection {
        ip: ip.clone(),
        mask: mask.to_vec(),
        ib,
        ic,
        region: region.to_vec(),
        fill_passes: passes,
    })
}

/// Splat, then fill the output disk.
pub fn rectify_splat(fisheye: &Image, params: &DistortionParams, geometry: &RadialGeometry) -> Result<PreCorrection> {
    let (ip, mask) = precorrect_splat(fisheye, params, geometry)?;
    inpaint_moving_average(&ip, &mask, &geometry.disk_mask())
}

/// Fisheye pixels that carry source content: inside the disk and mapping to
/// a radius inside it.
pub fn fisheye_validity(params: &DistortionParams, geometry: &RadialGeometry) -> Vec<bool> {
    let radius = geometry.radius();
    let mut valid = Vec::with_capacity(geometry.width * geometry.height);
    for y in 0..geometry.height {
        for x in 0..geometry.width {
            let r = geometry.pixel_radius(x, y);
            valid.push(r < radius && params.distort_unchecked(r) < radius);
        }
    }
    valid
}

/// Backward warp with a tabulated inverse: every output pixel inside the disk
/// bilinearly samples the fisheye at `r_d = r_u⁻¹`, weighting only valid
/// fisheye pixels.
pub fn rectify_backward(fisheye: &Image, params: &DistortionParams, geometry: &RadialGeometry) -> Result<Image> {
    let radius = geometry.radius();
    let lut = params.inverse_lut(radius * std::f64::consts::SQRT_2)?;
    let valid = fisheye_validity(params, geometry);
    let valid = Image::new(
        geometry.width,
        geometry.height,
        1,
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    let mut out = Image::zeros(fisheye.width(), fisheye.height(), fisheye.channels());
    let mut px = vec![0.0f32; fisheye.channels()];
    let mut w = [0.0f32];
    for y in 0..geometry.height {
        for x in 0..geometry.width {
            let (dx, dy) = geometry.offset(x, y);
            let r_u = dx.hypot(dy);
            if r_u >= radius {
                continue;
            }
            let s = if r_u > 0.0 { lut.lookup(r_u) / r_u } else { 1.0 };
            let (sx, sy) = geometry.to_sample_coords(dx * s, dy * s);
            if fisheye.sample_bilinear(sx, sy, &mut px) {
                valid.sample_bilinear(sx, sy, &mut w);
                if w[0] > 0.0 && w[0] < 1.0 - 1e-6 {
                    px.iter_mut().for_each(|v| *v /= w[0]);
                }
                out.pixel_mut(x, y).copy_from_slice(&px);
            }
        }
    }
    Ok(out)
}

/// Raw coefficients `k_i = 10^(lo_i + 2 p_i)` from normalized `(4)` values.
pub fn raw_from_normalized<'g, T: Scalar>(p: &Var<'g, T>) -> Result<Var<'g, T>> {
    let ln10 = std::f64::consts::LN_10;
    let lo: Vec<T> = RANGE_EXPONENTS.iter().map(|&(lo, _)| T::of(lo as f64 * ln10)).collect();
    let spans: Vec<T> = RANGE_EXPONENTS
        .iter()
        .map(|&(lo, hi)| T::of((hi - lo) as f64 * ln10))
        .collect();
    let g = p.graph();
    p.mul(&g.constant(Tensor::new([4], spans)?))?
        .add(&g.constant(Tensor::new([4], lo)?))
        .map(|v| v.exp())
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RectifyDiagnostics {
    /// Pixels whose Newton residual exceeded the tolerance and fell back to a
    /// detached bisection value.
    pub newton_fallbacks: usize,
    pub max_residual: f64,
}

/// Backward warp recorded on the tape. `fisheye` is `(S, S, C)`, `k` the raw
/// coefficients `(4)`. Output pixels outside the disk are zero.
pub fn rectify_differentiable<'g, T: Scalar>(
    fisheye: &Var<'g, T>,
    k: &Var<'g, T>,
    geometry: &RadialGeometry,
) -> Result<(Var<'g, T>, RectifyDiagnostics)> {
    let s = fisheye.shape();
    if s.len() != 3 || s[0] != geometry.height || s[1] != geometry.width {
        return Err(Error::contract(format!(
            "fisheye {s:?} does not match geometry {}x{}",
            geometry.width, geometry.height
        )));
    }
    if k.shape() != [4] {
        return Err(Error::Shape {
            op: "rectify_differentiable",
            lhs: k.shape(),
            rhs: vec![4],
        });
    }
    let raw: Vec<f64> = k.data().iter().map(|v| v.as_f64()).collect();
    if raw.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Unsupported(format!("coefficients {raw:?} must be nonnegative")));
    }
    let g = fisheye.graph();
    let radius = geometry.radius();
    let (cx, cy) = geometry.center();
    let mut idx = Vec::new();
    let (mut r_u, mut ux, mut uy) = (Vec::new(), Vec::new(), Vec::new());
    for y in 0..geometry.height {
        for x in 0..geometry.width {
            let (dx, dy) = geometry.offset(x, y);
            let r = dx.hypot(dy);
            if r < radius {
                idx.push(y * geometry.width + x);
                r_u.push(r);
                let (a, b) = if r > 0.0 { (dx / r, dy / r) } else { (0.0, 0.0) };
                ux.push(T::of(a));
                uy.push(T::of(b));
            }
        }
    }
    let n = idx.len();
    let target = g.constant(Tensor::new([n], r_u.iter().map(|&v| T::of(v)).collect())?);
    let ks: Vec<Var<'g, T>> = (0..4).map(|i| k.narrow(0, i, 1)).collect::<Result<_>>()?;
    let mut r = target;
    for _ in 0..NEWTON_STEPS {
        let r2 = r.square();
        // D(r) − r_u and D'(r), Horner form in r².
        let poly = ks[3]
            .mul(&r2)?
            .add(&ks[2])?
            .mul(&r2)?
            .add(&ks[1])?
            .mul(&r2)?
            .add(&ks[0])?
            .mul(&r2)?
            .add_scalar(1.0);
        let f = r.mul(&poly)?.sub(&target)?;
        let dpoly = ks[3]
            .scale(9.0)
            .mul(&r2)?
            .add(&ks[2].scale(7.0))?
            .mul(&r2)?
            .add(&ks[1].scale(5.0))?
            .mul(&r2)?
            .add(&ks[0].scale(3.0))?
            .mul(&r2)?
            .add_scalar(1.0);
        r = r.sub(&f.div(&dpoly)?)?;
    }
    let params = DistortionParams::unchecked([raw[0], raw[1], raw[2], raw[3]]);
    let solved = r.data();
    let mut diag = RectifyDiagnostics::default();
    let mut fallback_mask = vec![false; n];
    let mut fallback_vals = vec![T::zero(); n];
    for i in 0..n {
        let rd = solved[i].as_f64();
        let residual = if rd.is_finite() && rd >= 0.0 {
            (params.distort_unchecked(rd) - r_u[i]).abs()
        } else {
            f64::INFINITY
        };
        if residual > NEWTON_TOLERANCE {
            fallback_mask[i] = true;
            fallback_vals[i] = T::of(params.invert_unchecked(r_u[i]));
            diag.newton_fallbacks += 1;
        } else {
            diag.max_residual = diag.max_residual.max(residual);
        }
    }
    if diag.newton_fallbacks > 0 {
        r = r.replace_masked(&fallback_mask, &fallback_vals)?;
    }
    let x = r
        .mul(&g.constant(Tensor::new([n], ux)?))?
        .add_scalar(cx - 0.5)
        .reshape(&[n, 1])?;
    let y = r
        .mul(&g.constant(Tensor::new([n], uy)?))?
        .add_scalar(cy - 0.5)
        .reshape(&[n, 1])?;
    let coords = Var::concat(&[x, y], 1)?;
    let (samples, _) = fisheye.bilinear_sample(&coords)?;
    // Near the rim some taps land on fisheye pixels with no source content
    // (outside the disk, or mapping beyond it); renormalize over the rest.
    let valid: Vec<T> = fisheye_validity(&params, geometry)
        .into_iter()
        .map(|ok| if ok { T::one() } else { T::zero() })
        .collect();
    let (weight, _) = g
        .constant(Tensor::new([geometry.height, geometry.width, 1], valid)?)
        .bilinear_sample(&coords)?;
    let full: Vec<bool> = weight
        .data()
        .iter()
        .map(|w| w.as_f64() >= 1.0 - 1e-9 || w.as_f64() <= 0.0)
        .collect();
    let weight = weight.replace_masked(&full, &vec![T::one(); n])?;
    let out = samples
        .div(&weight)?
        .scatter_rows(Arc::from(idx), geometry.width * geometry.height)?
        .reshape(&[geometry.height, geometry.width, s[2]])?;
    Ok((out, diag))
}
