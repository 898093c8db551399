//! Distortion efficacy domains: where a single order's term displaces a pixel
//! by at least the threshold.

use std::path::Path;

use serde::Serialize;

use super::{coefficient_range, RANGE_EXPONENTS};
use crate::error::{Error, Result};

pub const DEFAULT_CANVAS_RADIUS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeoSpec {
    /// Polynomial order index, 1..=4.
    pub order: usize,
    pub k: f64,
    pub canvas_radius: usize,
    pub threshold: f64,
}

impl DeoSpec {
    pub fn new(order: usize, k: f64, canvas_radius: usize) -> Self {
        Self {
            order,
            k,
            canvas_radius,
            threshold: 1.0,
        }
    }

    /// `r* = (τ / k)^(1/(2i+1))`.
    pub fn boundary_radius(&self) -> f64 {
        (self.threshold / self.k).powf(1.0 / (2 * self.order + 1) as f64)
    }
}

#[derive(Clone, Debug)]
pub struct DeoMask {
    /// Canvas side, `2 · canvas_radius`.
    pub size: usize,
    pub mask: Vec<bool>,
    pub area: usize,
    pub boundary_radius: f64,
}

impl DeoMask {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::image::save_mask_png(path, self.size, self.size, &self.mask)
    }
}

/// Rasterizes `k · r^(2i+1) ≥ τ, r ≤ R_deo` on a `2R_deo` square canvas,
/// sampling at pixel centers.
pub fn deo_mask(spec: &DeoSpec) -> Result<DeoMask> {
    if !(1..=4).contains(&spec.order) {
        return Err(Error::contract(format!("order must be in 1..=4, got {}", spec.order)));
    }
    if !(spec.k > 0.0) || !spec.k.is_finite() {
        return Err(Error::domain(format!("coefficient must be positive, got {}", spec.k)));
    }
    if spec.canvas_radius == 0 {
        return Err(Error::contract("canvas radius must be positive"));
    }
    let size = 2 * spec.canvas_radius;
    let c = spec.canvas_radius as f64;
    let power = (2 * spec.order + 1) as i32;
    let mut mask = Vec::with_capacity(size * size);
    let mut area = 0;
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            let r = dx.hypot(dy);
            let on = r <= c && spec.k * r.powi(power) >= spec.threshold;
            area += on as usize;
            mask.push(on);
        }
    }
    Ok(DeoMask {
        size,
        mask,
        area,
        boundary_radius: spec.boundary_radius(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DeoInterval {
    pub index: usize,
    pub k_lo: f64,
    pub k_mid: f64,
    pub k_hi: f64,
    pub area_lo: usize,
    pub area: usize,
    pub area_hi: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeoOrder {
    pub order: usize,
    pub k_min: f64,
    pub k_max: f64,
    pub area_min: usize,
    pub area_max: usize,
    pub intervals: Vec<DeoInterval>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeoOrderCheck {
    /// `"within_order"` or `"cross_order"`.
    pub law: &'static str,
    pub interval: usize,
    /// The order for within-order checks; the pair compared for cross-order.
    pub orders: Vec<usize>,
    pub areas: Vec<usize>,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeoOrderingReport {
    pub canvas_radius: usize,
    pub intervals_per_range: usize,
    pub orders: Vec<DeoOrder>,
    pub checks: Vec<DeoOrderCheck>,
    pub all_hold: bool,
}

fn area(order: usize, k: f64, canvas_radius: usize) -> Result<usize> {
    Ok(deo_mask(&DeoSpec::new(order, k, canvas_radius))?.area)
}

/// Splits each coefficient range into equal log-space intervals, measures the
/// domain area at every interval's ends and geometric midpoint, and checks the
/// within-order and cross-order inequalities.
pub fn deo_ordering_report(intervals_per_range: usize, canvas_radius: usize) -> Result<DeoOrderingReport> {
    if intervals_per_range == 0 {
        return Err(Error::contract("need at least one interval per range"));
    }
    let mut orders = Vec::new();
    let mut checks = Vec::new();
    for order in 1..=4 {
        let (lo_exp, hi_exp) = RANGE_EXPONENTS[order - 1];
        let span = (hi_exp - lo_exp) as f64 / intervals_per_range as f64;
        let at = |e: f64| 10f64.powf(e);
        let (k_min, k_max) = coefficient_range(order);
        let area_min = area(order, k_min, canvas_radius)?;
        let area_max = area(order, k_max, canvas_radius)?;
        let mut intervals = Vec::new();
        for j in 0..intervals_per_range {
            let e0 = lo_exp as f64 + span * j as f64;
            let (k_lo, k_mid, k_hi) = (at(e0), at(e0 + span / 2.0), at(e0 + span));
            let iv = DeoInterval {
                index: j,
                k_lo,
                k_mid,
                k_hi,
                area_lo: area(order, k_lo, canvas_radius)?,
                area: area(order, k_mid, canvas_radius)?,
                area_hi: area(order, k_hi, canvas_radius)?,
            };
            let chain = [area_max, iv.area_hi, iv.area, iv.area_lo, area_min];
            checks.push(DeoOrderCheck {
                law: "within_order",
                interval: j,
                orders: vec![order],
                holds: chain.windows(2).all(|w| w[0] >= w[1]),
                areas: chain.to_vec(),
            });
            intervals.push(iv);
        }
        orders.push(DeoOrder {
            order,
            k_min,
            k_max,
            area_min,
            area_max,
            intervals,
        });
    }
    for j in 0..intervals_per_range {
        for o in 0..3 {
            let (a, b) = (orders[o].intervals[j].area, orders[o + 1].intervals[j].area);
            checks.push(DeoOrderCheck {
                law: "cross_order",
                interval: j,
                orders: vec![o + 1, o + 2],
                areas: vec![a, b],
                holds: a >= b,
            });
        }
    }
    let all_hold = checks.iter().all(|c| c.holds);
    Ok(DeoOrderingReport {
        canvas_radius,
        intervals_per_range,
        orders,
        checks,
        all_hold,
    })
}
