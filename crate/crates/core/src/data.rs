//! Synthetic training pairs: a circular-cropped perspective image, its
//! fisheye rendering under random legal coefficients, and the coefficients.
//!
//! A dataset is a pure function of its manifest (and the source directory
//! when one is given). Every sample draws from its own ChaCha stream, so
//! samples can be produced in any order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distortion::{apply_disk_mask, coefficient_range, synthesize_fisheye, DistortionParams, RadialGeometry};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.json";
const SPLIT_SALT: u64 = 0x5eed_0000_5711;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    #[default]
    LogUniform,
    LinearUniform,
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" | "log-uniform" => Ok(Self::LogUniform),
            "linear" | "linear-uniform" => Ok(Self::LinearUniform),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?}"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LogUniform => "log-uniform",
            Self::LinearUniform => "linear-uniform",
        })
    }
}

/// Draws each coefficient independently inside its legal range.
pub fn sample_params(rng: &mut impl Rng, mode: SamplingMode) -> DistortionParams {
    match mode {
        SamplingMode::LogUniform => {
            let p: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..=1.0));
            DistortionParams::from_normalized(p)
        }
        SamplingMode::LinearUniform => DistortionParams::unchecked(std::array::from_fn(|i| {
            let (lo, hi) = coefficient_range(i + 1);
            rng.gen_range(lo..=hi)
        })),
    }
}

/// Center square crop, resize to `resolution`, zero outside the inscribed
/// disk.
pub fn crop_to_disk(img: &Image, resolution: usize) -> Result<Image> {
    if resolution == 0 {
        return Err(Error::contract("resolution must be positive"));
    }
    let side = img.width().min(img.height());
    let (x0, y0) = ((img.width() - side) / 2, (img.height() - side) / 2);
    let square = Image::from_fn(side, side, img.channels(), |x, y, c| img.get(x0 + x, y0 + y, c));
    let mut out = if side == resolution {
        square
    } else {
        let rgb = image::imageops::resize(
            &square.to_rgb8(),
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        );
        Image::from_rgb8(&rgb)
    };
    apply_disk_mask(&mut out);
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub images: Vec<(String, Image)>,
    pub skipped: Vec<String>,
}

/// Loads every decodable image in `dir` (sorted by name) and crops it.
/// Files that fail to decode are skipped with a warning.
pub fn ingest_and_crop(dir: &Path, resolution: usize) -> Result<Ingested> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut out = Ingested::default();
    for path in names {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        match Image::load(&path) {
            Ok(img) => out.images.push((name, crop_to_disk(&img, resolution)?)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                out.skipped.push(name);
            }
        }
    }
    if out.images.is_empty() {
        return Err(Error::Degenerate(format!("no decodable images in {}", dir.display())));
    }
    Ok(out)
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_colour(rng: &mut impl Rng) -> [f32; 3] {
    hsv(rng.gen(), rng.gen_range(0.3..1.0), rng.gen_range(0.2..1.0))
}

/// A random scene of straight edges, stripes and discs over a gradient,
/// standing in for perspective photographs.
pub fn procedural_scene(rng: &mut impl Rng, size: usize) -> Image {
    let s = size as f32;
    let (c0, c1) = (random_colour(rng), random_colour(rng));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let mut img = Image::from_fn(size, size, 3, |x, y, c| {
        let t = (((x as f32 / s - 0.5) * ga + (y as f32 / s - 0.5) * gb) + 0.75).clamp(0.0, 1.5) / 1.5;
        c0[c] * (1.0 - t) + c1[c] * t
    });
    let shapes = rng.gen_range(5..10);
    for _ in 0..shapes {
        let colour = random_colour(rng);
        let kind = rng.gen_range(0..4);
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let extent = rng.gen_range(0.08..0.45) * s;
        let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let period = rng.gen_range(0.05..0.2) * s;
        let aspect = rng.gen_range(0.2..1.0);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let (u, v) = (dx * ct + dy * st, -dx * st + dy * ct);
                let inside = match kind {
                    0 => u.abs() < extent && v.abs() < extent * aspect,
                    1 => dx.hypot(dy) < extent * 0.6,
                    2 => u.abs() < extent && (v / period).rem_euclid(1.0) < 0.5 && v.abs() < extent,
                    _ => v.abs() < 0.02 * s + 0.5,
                };
                if inside {
                    img.pixel_mut(x, y).copy_from_slice(&colour);
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: Option<PathBuf>,
    pub count: usize,
    pub test_count: usize,
    pub resolution: usize,
    pub sampling: SamplingMode,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Source files that failed to decode.
    #[serde(default)]
    pub skipped: Vec<String>,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

fn sample_index(id: &str) -> Result<usize> {
    id.strip_prefix('s')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad sample id {id:?}")))
}

impl DatasetManifest {
    /// Plans a dataset: the id split is a seeded shuffle.
    pub fn plan(
        count: usize,
        test_count: usize,
        resolution: usize,
        sampling: SamplingMode,
        seed: u64,
        source: Option<PathBuf>,
    ) -> Result<Self> {
        if count == 0 || test_count > count {
            return Err(Error::Config(format!(
                "cannot split {count} samples with {test_count} for test"
            )));
        }
        if resolution < 16 || !resolution.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "resolution {resolution} must be even and at least 16"
            )));
        }
        let mut ids: Vec<String> = (0..count).map(sample_id).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let mut test_ids = ids.split_off(count - test_count);
        ids.sort();
        test_ids.sort();
        Ok(Self {
            source,
            count,
            test_count,
            resolution,
            sampling,
            seed,
            train_ids: ids,
            test_ids,
            skipped: Vec::new(),
        })
    }

    /// SHA-256 of the manifest's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<&String> = self.train_ids.iter().chain(&self.test_ids).collect();
        all.sort();
        let expected: Vec<String> = (0..self.count).map(sample_id).collect();
        if all.len() != self.count || all.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(Error::Format("train/test ids must partition the samples".into()));
        }
        Ok(())
    }
}

/// Seed of the stream a sample draws from.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = dataset_seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub seed: u64,
    pub k: [f64; 4],
    pub normalized: [f64; 4],
    pub source: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub meta: SampleMeta,
    pub fisheye: Image,
    pub gt: Image,
}

impl TrainSample {
    pub fn params(&self) -> DistortionParams {
        DistortionParams::unchecked(self.meta.k)
    }
}

/// Produces one sample in memory. `sources` are pre-cropped images; without
/// any, a procedural scene is drawn.
pub fn generate_sample(manifest: &DatasetManifest, index: usize, sources: &[(String, Image)]) -> Result<TrainSample> {
    let seed = sample_seed(manifest.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = sample_params(&mut rng, manifest.sampling);
    let (gt, source) = if sources.is_empty() {
        let mut img = procedural_scene(&mut rng, manifest.resolution);
        apply_disk_mask(&mut img);
        (img, None)
    } else {
        let (name, img) = &sources[index % sources.len()];
        (img.clone(), Some(name.clone()))
    };
    // Persisted images are 8-bit, so quantize before rendering the fisheye.
    let gt = gt.quantized();
    let geom = RadialGeometry::square(manifest.resolution);
    let fisheye = synthesize_fisheye(&gt, &params, &geom)?.image.quantized();
    Ok(TrainSample {
        meta: SampleMeta {
            id: sample_id(index),
            seed,
            k: params.k,
            normalized: params.normalized()?,
            source,
        },
        fisheye,
        gt,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BuildReport {
    pub written: usize,
    pub manifest_hash: String,
}

/// Writes every sample plus the manifest into `out`. A `.partial` marker
/// stays behind if any write fails.
pub fn build_dataset(manifest: &DatasetManifest, out: &Path) -> Result<BuildReport> {
    manifest.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(".partial");
    std::fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
    let mut manifest = manifest.clone();
    let sources = match &manifest.source {
        Some(dir) => {
            let ing = ingest_and_crop(dir, manifest.resolution)?;
            manifest.skipped = ing.skipped;
            ing.images
        }
        None => Vec::new(),
    };
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(manifest.count);
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (manifest, sources) = (&manifest, &sources);
                scope.spawn(move || -> Result<()> {
                    for index in (w..manifest.count).step_by(workers) {
                        write_sample(out, &generate_sample(manifest, index, sources)?)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("synthesis worker panicked"))
            .collect()
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(BuildReport {
        written: manifest.count,
        manifest_hash: manifest.hash(),
    })
}

fn write_sample(dir: &Path, s: &TrainSample) -> Result<()> {
    s.fisheye.save_png(dir.join(format!("{}_fish.png", s.meta.id)))?;
    s.gt.save_png(dir.join(format!("{}_gt.png", s.meta.id)))?;
    let path = dir.join(format!("{}.json", s.meta.id));
    std::fs::write(&path, serde_json::to_vec_pretty(&s.meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_sample(dir: &Path, id: &str) -> Result<TrainSample> {
    sample_index(id)?;
    let path = dir.join(format!("{id}.json"));
    let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    Ok(TrainSample {
        meta,
        fisheye: Image::load(dir.join(format!("{id}_fish.png")))?,
        gt: Image::load(dir.join(format!("{id}_gt.png")))?,
    })
}

/// A built dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        if dir.join(".partial").exists() {
            return Err(Error::Format(format!("{} is an incomplete build", dir.display())));
        }
        let load = |ids: &[String]| ids.iter().map(|id| load_sample(dir, id)).collect::<Result<Vec<_>>>();
        Ok(Self {
            train: load(&manifest.train_ids)?,
            test: load(&manifest.test_ids)?,
            manifest,
        })
    }
}

/// SHA-256 of every file in a dataset directory, sorted by name.
pub fn directory_digest(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Ok((
                p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                hex::encode(Sha256::digest(bytes)),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests;
