//! Image quality metrics on `[0, 1]` images.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) evaluated only where the
//! window fits, on BT.601 luma for colour input. MS-SSIM drops scales whose
//! side would fall below the window and renormalizes the remaining weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![a.height(), a.width(), a.channels()],
            rhs: vec![b.height(), b.width(), b.channels()],
        });
    }
    if a.data().is_empty() {
        return Err(Error::contract("metric on an empty image"));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for unit data range, capped for identical
/// images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    })
}

fn luma(img: &Image) -> Result<Vec<f64>> {
    match img.channels() {
        1 => Ok(img.data().iter().map(|&v| v as f64).collect()),
        3 => Ok(img
            .data()
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()),
        c => Err(Error::Unsupported(format!("{c}-channel image"))),
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over positions where the whole window fits.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * rows[(oy + i) * ow + ox]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean luminance-contrast-structure index and mean contrast-structure term.
fn ssim_components(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<(f64, f64)> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, ow, oh) = filter_valid(a, w, h, &k);
    let (mu_b, ..) = filter_valid(b, w, h, &k);
    let (aa, ..) = filter_valid(&prod(a, a), w, h, &k);
    let (bb, ..) = filter_valid(&prod(b, b), w, h, &k);
    let (ab, ..) = filter_valid(&prod(a, b), w, h, &k);
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    let n = (ow * oh) as f64;
    Ok((s_sum / n, cs_sum / n))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    Ok(ssim_components(&luma(a)?, &luma(b)?, a.width(), a.height())?.0)
}

fn halve(x: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for xx in 0..nw {
            let i = 2 * y * w + 2 * xx;
            out[y * nw + xx] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    (out, nw, nh)
}

/// Number of dyadic scales whose smaller side stays at or above the window.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut side = width.min(height);
    let mut n = 0;
    while n < MS_SSIM_WEIGHTS.len() && side >= SSIM_WINDOW {
        n += 1;
        side /= 2;
    }
    n
}

pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let scales = ms_ssim_scales(a.width(), a.height());
    if scales == 0 {
        return Err(Error::domain(format!(
            "MS-SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (luma(a)?, luma(b)?);
    let (mut w, mut h) = (a.width(), a.height());
    let mut value = 1.0;
    for (s, weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (full, cs) = ssim_components(&x, &y, w, h)?;
        let term = if s + 1 == scales { full } else { cs };
        value *= term.max(0.0).powf(weight / total);
        if s + 1 < scales {
            let (nx, nw, nh) = halve(&x, w, h);
            y = halve(&y, w, h).0;
            x = nx;
            (w, h) = (nw, nh);
        }
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

impl MetricReport {
    pub fn compute(pred: &Image, gt: &Image) -> Result<Self> {
        Ok(Self {
            psnr: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
            ms_ssim: ms_ssim(pred, gt)?,
        })
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(MetricReport {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            ms_ssim: reports.iter().map(|r| r.ms_ssim).sum::<f64>() / n,
        })
    }
}
