//! Tokenizing dense feature maps into fixed 8×8 patches and back.
//!
//! A [`Partition`] assigns pixels to regions: concentric rings of the inscribed
//! disk (annulus slicing) or square tiles. Each region's pixels are gathered
//! in a fixed order and mapped by a per-region linear projection to 64 token
//! positions; recovery applies the paired inverse-direction map and scatters
//! back. Features are laid out `(h, w, c)`, tokens `(regions, 64, c)` with the
//! 64 positions read as an 8×8 window in row-major order.

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::distortion::RadialGeometry;
use crate::error::{Error, Result};

/// Token positions per patch (an 8×8 window).
pub const TOKENS: usize = 64;
pub const WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlicingMode {
    Annulus,
    Square,
}

impl std::fmt::Display for SlicingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Annulus => "annulus",
            Self::Square => "square",
        })
    }
}

impl std::str::FromStr for SlicingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annulus" => Ok(Self::Annulus),
            "square" => Ok(Self::Square),
            _ => Err(Error::Config(format!("unknown slicing mode {s:?} (annulus|square)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Partition {
    mode: SlicingMode,
    width: usize,
    height: usize,
    /// Ring width in pixels (annulus) or tile side (square).
    step: usize,
    regions: Vec<Vec<usize>>,
    order: Arc<[usize]>,
}

impl Partition {
    /// Rings `t = 0..n` of integer width `⌊R/n⌋` over the inscribed disk, the
    /// last ring extending to `R`. Assignment uses the pixel-center radius,
    /// boundary ties going outward; each ring lists its pixels by ascending
    /// angle, then radius.
    pub fn annulus(width: usize, height: usize, n: usize) -> Result<Self> {
        if width != height {
            return Err(Error::contract(format!(
                "annulus slicing needs a square map, got {width}x{height}"
            )));
        }
        if width == 0 {
            return Err(Error::contract("empty feature map"));
        }
        let geom = RadialGeometry::square(width);
        let radius = geom.radius();
        if n == 0 || n as f64 > radius {
            return Err(Error::contract(format!(
                "{n} rings do not fit a disk of radius {radius} (need 1 ≤ n ≤ R)"
            )));
        }
        let ring_width = (radius / n as f64).floor() as usize;
        let mut keyed: Vec<Vec<(f64, f64, usize)>> = vec![Vec::new(); n];
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = geom.offset(x, y);
                let r = dx.hypot(dy);
                if r >= radius {
                    continue;
                }
                let t = ((r / ring_width as f64).floor() as usize).min(n - 1);
                let angle = dy.atan2(dx).rem_euclid(TAU);
                keyed[t].push((angle, r, y * width + x));
            }
        }
        let regions = keyed
            .into_iter()
            .map(|mut ring| {
                ring.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                ring.into_iter().map(|(_, _, i)| i).collect::<Vec<_>>()
            })
            .collect();
        Ok(Self::from_regions(
            SlicingMode::Annulus,
            width,
            height,
            ring_width,
            regions,
        ))
    }

    /// `grid × grid` square tiles in raster order, pixels raster-ordered within
    /// each tile.
    pub fn square(width: usize, height: usize, grid: usize) -> Result<Self> {
        if grid == 0 || !width.is_multiple_of(grid) || !height.is_multiple_of(grid) || width != height {
            return Err(Error::contract(format!(
                "a {grid}x{grid} tile grid does not evenly divide a {width}x{height} map"
            )));
        }
        let side = width / grid;
        let mut regions = Vec::with_capacity(grid * grid);
        for ty in 0..grid {
            for tx in 0..grid {
                let mut r = Vec::with_capacity(side * side);
                for y in ty * side..(ty + 1) * side {
                    for x in tx * side..(tx + 1) * side {
                        r.push(y * width + x);
                    }
                }
                regions.push(r);
            }
        }
        Ok(Self::from_regions(SlicingMode::Square, width, height, side, regions))
    }

    /// Partition for `count` patches in the given mode: `count` rings, or a
    /// `√count × √count` tile grid.
    pub fn build(mode: SlicingMode, size: usize, count: usize) -> Result<Self> {
        match mode {
            SlicingMode::Annulus => Self::annulus(size, size, count),
            SlicingMode::Square => {
                let g = (count as f64).sqrt().round() as usize;
                if g * g != count {
                    return Err(Error::contract(format!(
                        "square patch count {count} is not a perfect square"
                    )));
                }
                Self::square(size, size, g)
            }
        }
    }

    fn from_regions(mode: SlicingMode, width: usize, height: usize, step: usize, regions: Vec<Vec<usize>>) -> Self {
        let order: Vec<usize> = regions.iter().flatten().copied().collect();
        Self {
            mode,
            width,
            height,
            step,
            regions,
            order: order.into(),
        }
    }

    pub fn mode(&self) -> SlicingMode {
        self.mode
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Flat pixel indices (`y · w + x`) of region `t`, in gather order.
    pub fn region(&self, t: usize) -> &[usize] {
        &self.regions[t]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        self.regions.iter().map(Vec::len).collect()
    }

    /// All region index lists concatenated.
    pub fn order(&self) -> &Arc<[usize]> {
        &self.order
    }

    pub fn covered(&self) -> usize {
        self.order.len()
    }

    pub fn region_mask(&self, t: usize) -> Vec<bool> {
        let mut m = vec![false; self.width * self.height];
        for &i in &self.regions[t] {
            m[i] = true;
        }
        m
    }

    /// Region that already holds exactly 64 pixels in window order needs no
    /// projection (plain 8×8 tiling).
    pub fn is_identity_region(&self, t: usize) -> bool {
        self.mode == SlicingMode::Square && self.step == WINDOW && self.regions[t].len() == TOKENS
    }

    /// Shapes of the forward `(64, P_t)` and inverse `(P_t, 64)` projection
    /// matrices, `None` for identity regions.
    pub fn projection_shapes(&self) -> Vec<Option<([usize; 2], [usize; 2])>> {
        (0..self.len())
            .map(|t| {
                if self.is_identity_region(t) {
                    None
                } else {
                    let p = self.regions[t].len();
                    Some(([TOKENS, p], [p, TOKENS]))
                }
            })
            .collect()
    }

    /// Per-region masks as PNGs plus `rings.json` with the pixel counts.
    pub fn dump_debug(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in 0..self.len() {
            crate::image::save_mask_png(
                dir.join(format!("region_{t:03}.png")),
                self.width,
                self.height,
                &self.region_mask(t),
            )?;
        }
        let json = serde_json::json!({
            "mode": self.mode,
            "width": self.width,
            "height": self.height,
            "step": self.step,
            "regions": self.len(),
            "pixel_counts": self.region_sizes(),
            "covered": self.covered(),
        });
        let path = dir.join("rings.json");
        std::fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&path, e))
    }
}

fn check_feature_shape(shape: &[usize], part: &Partition) -> Result<usize> {
    if shape.len() != 3 || shape[0] != part.height || shape[1] != part.width {
        return Err(Error::Shape {
            op: "slice",
            lhs: shape.to_vec(),
            rhs: vec![part.height, part.width],
        });
    }
    Ok(shape[2])
}

/// `(h, w, c)` features → `(regions, 64, c)` tokens. `proj[t]` is region
/// `t`'s `(64, P_t)` map, ignored for identity regions.
pub fn slice<'g, T: Scalar>(feat: &Var<'g, T>, part: &Partition, proj: &[Option<Var<'g, T>>]) -> Result<Var<'g, T>> {
    let c = check_feature_shape(&feat.shape(), part)?;
    if proj.len() != part.len() {
        return Err(Error::contract(format!(
            "{} projections for {} regions",
            proj.len(),
            part.len()
        )));
    }
    let flat = feat.reshape(&[part.height * part.width, c])?;
    let gathered = flat.gather_rows(part.order.clone())?;
    let mut tokens = Vec::with_capacity(part.len());
    let mut start = 0;
    for (t, p) in proj.iter().enumerate() {
        let len = part.regions[t].len();
        let rows = gathered.narrow(0, start, len)?;
        start += len;
        tokens.push(match p {
            Some(w) => w.matmul(&rows)?,
            None if part.is_identity_region(t) => rows,
            None => return Err(Error::contract(format!("region {t} needs a projection"))),
        });
    }
    Var::concat(&tokens, 0)?.reshape(&[part.len(), TOKENS, c])
}

/// `(regions, 64, c)` tokens → `(h, w, c)` map, zero outside every region.
/// `inv[t]` is region `t`'s `(P_t, 64)` map.
pub fn recover<'g, T: Scalar>(tokens: &Var<'g, T>, part: &Partition, inv: &[Option<Var<'g, T>>]) -> Result<Var<'g, T>> {
    let shape = tokens.shape();
    if shape.len() != 3 || shape[0] != part.len() || shape[1] != TOKENS {
        return Err(Error::contract(format!(
            "tokens {shape:?} do not match a {}-region partition",
            part.len()
        )));
    }
    if inv.len() != part.len() {
        return Err(Error::contract(format!(
            "{} projections for {} regions",
            inv.len(),
            part.len()
        )));
    }
    let c = shape[2];
    let mut pieces = Vec::with_capacity(part.len());
    for (t, p) in inv.iter().enumerate() {
        let tok = tokens.narrow(0, t, 1)?.reshape(&[TOKENS, c])?;
        pieces.push(match p {
            Some(v) => v.matmul(&tok)?,
            None if part.is_identity_region(t) => tok,
            None => return Err(Error::contract(format!("region {t} needs a projection"))),
        });
    }
    let rows = Var::concat(&pieces, 0)?;
    rows.scatter_rows(part.order.clone(), part.height * part.width)?
        .reshape(&[part.height, part.width, c])
}

/// Plain 8×8 tiling of an `(h, w, c)` tensor into `(m, 8, 8, c)`, raster order.
pub fn slice_square<T: Scalar>(feat: &Tensor<T>) -> Result<Tensor<T>> {
    let s = feat.shape();
    if s.len() != 3 || !s[0].is_multiple_of(WINDOW) || !s[1].is_multiple_of(WINDOW) {
        return Err(Error::contract(format!(
            "square slicing needs (h, w, c) with h, w divisible by 8, got {s:?}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gy, gx) = (h / WINDOW, w / WINDOW);
    let mut out = Vec::with_capacity(feat.len());
    for ty in 0..gy {
        for tx in 0..gx {
            for y in 0..WINDOW {
                let row = ((ty * WINDOW + y) * w + tx * WINDOW) * c;
                out.extend_from_slice(&feat.data()[row..row + WINDOW * c]);
            }
        }
    }
    Tensor::new([gy * gx, WINDOW, WINDOW, c], out)
}

/// Inverse of [`slice_square`].
pub fn unslice_square<T: Scalar>(tiles: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = tiles.shape();
    if s.len() != 4
        || s[1] != WINDOW
        || s[2] != WINDOW
        || !h.is_multiple_of(WINDOW)
        || !w.is_multiple_of(WINDOW)
        || s[0] != (h / WINDOW) * (w / WINDOW)
    {
        return Err(Error::contract(format!("{s:?} tiles do not assemble into {h}x{w}")));
    }
    let c = s[3];
    let gx = w / WINDOW;
    let mut out = vec![T::zero(); h * w * c];
    for (m, tile) in tiles.data().chunks(TOKENS * c).enumerate() {
        let (ty, tx) = (m / gx, m % gx);
        for y in 0..WINDOW {
            let dst = ((ty * WINDOW + y) * w + tx * WINDOW) * c;
            out[dst..dst + WINDOW * c].copy_from_slice(&tile[y * WINDOW * c..(y + 1) * WINDOW * c]);
        }
    }
    Tensor::new([h, w, c], out)
}

/// Mean over patches of `max − min` of a per-pixel map, counting only
/// pixels inside the partition's disk. Patches with no such pixel are
/// skipped.
pub fn mean_patch_spread(values: &[f64], part: &Partition) -> f64 {
    let disk = RadialGeometry::new(part.width(), part.height())
        .map(|g| g.disk_mask())
        .unwrap_or_default();
    let (mut total, mut count) = (0.0, 0usize);
    for t in 0..part.len() {
        let (lo, hi) = part
            .region(t)
            .iter()
            .filter(|&&i| disk[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
                (a.min(values[i]), b.max(values[i]))
            });
        if lo <= hi {
            total += hi - lo;
            count += 1;
        }
    }
    total / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Graph;
    use crate::distortion::{compute_ddm, DistortionParams};

    fn disk_count(size: usize) -> usize {
        RadialGeometry::square(size).disk_mask().iter().filter(|&&b| b).count()
    }

    #[test]
    fn single_ring_is_whole_disk() {
        let p = Partition::annulus(128, 128, 1).unwrap();
        let area = std::f64::consts::PI * 64.0 * 64.0;
        assert_eq!(p.region(0).len(), disk_count(128));
        assert!((p.region(0).len() as f64 - area).abs() / area < 0.01);
    }

    #[test]
    fn innermost_ring_of_eight() {
        let p = Partition::annulus(128, 128, 8).unwrap();
        let brute = (0..128 * 128)
            .filter(|&i| RadialGeometry::square(128).pixel_radius(i % 128, i / 128) < 8.0)
            .count();
        assert_eq!(p.region(0).len(), brute);
        assert!((brute as f64 - std::f64::consts::PI * 64.0).abs() < 10.0);
        assert_eq!(p.region_sizes().iter().sum::<usize>(), disk_count(128));
    }

    #[test]
    fn too_many_rings_is_contract_error() {
        assert!(matches!(Partition::annulus(64, 64, 33), Err(Error::Contract(_))));
        assert!(Partition::annulus(64, 64, 32).is_ok());
    }

    /// Disjoint, covering, radius-bounded, angle-then-radius ordered.
    fn check_partition(size: usize, n: usize) {
        let p = Partition::annulus(size, size, n).unwrap();
        let geom = RadialGeometry::square(size);
        let disk = geom.disk_mask();
        let mut seen = vec![0u8; size * size];
        let width = (geom.radius() / n as f64).floor();
        for t in 0..n {
            let mut last = (-1.0f64, -1.0f64);
            for &i in p.region(t) {
                seen[i] += 1;
                let (dx, dy) = geom.offset(i % size, i / size);
                let r = dx.hypot(dy);
                assert!(r >= t as f64 * width);
                if t + 1 < n {
                    assert!(r < (t + 1) as f64 * width);
                }
                let a = dy.atan2(dx).rem_euclid(TAU);
                assert!(a > last.0 || (a == last.0 && r >= last.1));
                last = (a, r);
            }
        }
        for i in 0..size * size {
            assert_eq!(seen[i], disk[i] as u8, "pixel {i}");
        }
    }

    #[test]
    fn partitions_used_by_the_network_are_valid() {
        for size in [8, 16, 32, 64, 128] {
            for n in [1, 2, 4, 8, 16, 32] {
                if n <= size / 2 {
                    check_partition(size, n);
                }
            }
        }
    }

    #[test]
    fn square_tiles_raster_order() {
        let p = Partition::square(16, 16, 2).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.region(1)[0], 8);
        assert_eq!(p.region(2)[0], 8 * 16);
        assert!((0..4).all(|t| p.is_identity_region(t)));
        assert_eq!(p.covered(), 256);
        assert!(Partition::square(16, 16, 3).is_err());
    }

    #[test]
    fn plain_tiling_round_trips() {
        let data: Vec<f64> = (0..16 * 16 * 2).map(|v| v as f64).collect();
        let t = Tensor::new([16, 16, 2], data).unwrap();
        let tiles = slice_square(&t).unwrap();
        assert_eq!(tiles.shape(), &[4, 8, 8, 2]);
        // Second tile starts at column 8 of row 0.
        assert_eq!(tiles.data()[TOKENS * 2], (8 * 2) as f64);
        assert_eq!(unslice_square(&tiles, 16, 16).unwrap(), t);
        let big = slice_square(&Tensor::<f32>::zeros([128, 128, 1])).unwrap();
        assert_eq!(big.shape()[0], 256);
        assert!(slice_square(&Tensor::<f32>::zeros([12, 16, 1])).is_err());
    }

    fn random_projections<'g>(
        g: &'g Graph<f64>,
        part: &Partition,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Option<Var<'g, f64>>>, Vec<Option<Var<'g, f64>>>) {
        part.projection_shapes()
            .into_iter()
            .map(|s| match s {
                None => (None, None),
                Some((f, i)) => {
                    let mut mk = |shape: [usize; 2]| {
                        let n = shape[0] * shape[1];
                        g.param(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap())
                    };
                    (Some(mk(f)), Some(mk(i)))
                }
            })
            .unzip()
    }

    #[test]
    fn zero_in_zero_out_and_disk_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let part = Partition::annulus(16, 16, 4).unwrap();
        let g = Graph::new();
        let (fw, inv) = random_projections(&g, &part, &mut rng);
        let zero = g.constant(Tensor::zeros([16, 16, 3]));
        let tok = slice(&zero, &part, &fw).unwrap();
        assert_eq!(tok.shape(), vec![4, TOKENS, 3]);
        assert!(tok.data().iter().all(|&v| v == 0.0));
        let back = recover(&tok, &part, &inv).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));

        let x = g.constant(Tensor::new([16, 16, 3], (0..768).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let back = recover(&slice(&x, &part, &fw).unwrap(), &part, &inv).unwrap().data();
        let disk = RadialGeometry::square(16).disk_mask();
        for (i, &inside) in disk.iter().enumerate() {
            if !inside {
                assert!(back[i * 3..i * 3 + 3].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn scatter_writes_only_region_pixels() {
        let part = Partition::annulus(32, 32, 4).unwrap();
        let g = Graph::<f64>::new();
        for t in 0..4 {
            // Tokens nonzero in region t only; identity-like inverse of ones.
            let mut tok = vec![0.0; 4 * TOKENS];
            tok[t * TOKENS..(t + 1) * TOKENS].fill(1.0);
            let inv: Vec<_> = part
                .projection_shapes()
                .into_iter()
                .map(|s| s.map(|(_, i)| g.constant(Tensor::full(i, 1.0))))
                .collect();
            let out = recover(&g.constant(Tensor::new([4, TOKENS, 1], tok).unwrap()), &part, &inv)
                .unwrap()
                .data();
            let mask = part.region_mask(t);
            for i in 0..32 * 32 {
                assert_eq!(out[i] != 0.0, mask[i], "region {t} pixel {i}");
            }
        }
    }

    #[test]
    fn ring_count_mismatch_is_contract_error() {
        let part = Partition::annulus(16, 16, 4).unwrap();
        let g = Graph::<f64>::new();
        let tok = g.constant(Tensor::zeros([3, TOKENS, 1]));
        assert!(matches!(
            recover(&tok, &part, &[None, None, None]),
            Err(Error::Contract(_))
        ));
        let feat = g.constant(Tensor::zeros([8, 8, 1]));
        assert!(slice(&feat, &part, &[None, None, None, None]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn slice_and_recover_are_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, square in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let part = if square { Partition::square(16, 16, 1).unwrap() } else { Partition::annulus(16, 16, 2).unwrap() };
            let g = Graph::new();
            let (fw, inv) = random_projections(&g, &part, &mut rng);
            let mut rand_t = || Tensor::new([16, 16, 2], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (x, y) = (g.constant(rand_t()), g.constant(rand_t()));
            let f = |v: Var<'_, f64>| recover(&slice(&v, &part, &fw).unwrap(), &part, &inv).unwrap().data();
            let lhs = f(x.scale(a).add(&y.scale(b)).unwrap());
            let (fx, fy) = (f(x), f(y));
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn gather_touches_each_disk_value_once() {
        let part = Partition::annulus(64, 64, 8).unwrap();
        let mut idx = part.order().to_vec();
        idx.sort_unstable();
        let disk: Vec<usize> = RadialGeometry::square(64)
            .disk_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        assert_eq!(idx, disk);
    }

    /// Mean within-patch DDM spread: annulus (n = 16) below 8×8 squares.
    #[test]
    fn annulus_patches_are_more_uniform_in_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = RadialGeometry::square(128);
        let ann = Partition::annulus(128, 128, 16).unwrap();
        let sq = Partition::square(128, 128, 16).unwrap();
        for _ in 0..100 {
            let p = DistortionParams::from_normalized([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
            let ddm = compute_ddm(&p, &geom).unwrap();
            assert!(mean_patch_spread(&ddm.values, &ann) < mean_patch_spread(&ddm.values, &sq));
        }
    }

    #[test]
    fn debug_dump_writes_masks_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let part = Partition::annulus(32, 32, 4).unwrap();
        part.dump_debug(dir.path()).unwrap();
        assert!(dir.path().join("region_003.png").exists());
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("rings.json")).unwrap()).unwrap();
        assert_eq!(v["pixel_counts"].as_array().unwrap().len(), 4);
    }
}
