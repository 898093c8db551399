//! One function per subcommand. Each writes its artifacts and returns the
//! JSON summary the binary prints.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use fishformer_core::correction::rectify_splat;
use fishformer_core::data::{build_dataset, crop_to_disk, BuildReport, Dataset, DatasetManifest, SamplingMode};
use fishformer_core::distortion::{
    compute_ddm, deo_mask, deo_ordering_report, DeoOrderingReport, DeoSpec, DistortionParams, RadialGeometry,
};
use fishformer_core::gradcheck::{op_suite, GradCheckReport};
use fishformer_core::image::Image;
use fishformer_core::metrics::MetricReport;
use fishformer_core::net::{Fishformer, FishformerConfig};
use fishformer_core::slicing::{Partition, SlicingMode};
use fishformer_core::train::{end_to_end_gradcheck, train, TrainReport};

use crate::config::RunConfig;

/// Sibling path that carries a `.partial` marker until the write completes.
fn partial_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (stem, ext) = name.rsplit_once('.').unwrap_or((&name, ""));
    path.with_file_name(if ext.is_empty() {
        format!("{stem}.partial")
    } else {
        format!("{stem}.partial.{ext}")
    })
}

fn finish(tmp: &Path, path: &Path) -> Result<()> {
    std::fs::rename(tmp, path).with_context(|| format!("moving {} into place", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = partial_path(path);
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", tmp.display()))?;
    finish(&tmp, path)
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let tmp = partial_path(path);
    img.save_png(&tmp)?;
    finish(&tmp, path)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub test_count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub source: Option<PathBuf>,
}

pub fn synth(a: &SynthArgs) -> Result<BuildReport> {
    let manifest = DatasetManifest::plan(
        a.count,
        a.test_count,
        a.resolution,
        a.sampling,
        a.seed,
        a.source.clone(),
    )?;
    Ok(build_dataset(&manifest, &a.out)?)
}

#[derive(Serialize)]
pub struct DeoSummary {
    pub order: usize,
    pub k: f64,
    pub canvas_radius: usize,
    pub area: usize,
    pub boundary_radius: f64,
    pub mask: PathBuf,
}

pub fn deo(order: usize, k: f64, radius: usize, out: &Path) -> Result<DeoSummary> {
    let mask = deo_mask(&DeoSpec::new(order, k, radius))?;
    create_dir(out)?;
    let png = out.join(format!("deo_order{order}.png"));
    let tmp = partial_path(&png);
    mask.save_png(&tmp)?;
    finish(&tmp, &png)?;
    let summary = DeoSummary {
        order,
        k,
        canvas_radius: radius,
        area: mask.area,
        boundary_radius: mask.boundary_radius,
        mask: png,
    };
    write_json(&out.join(format!("deo_order{order}.json")), &summary)?;
    Ok(summary)
}

pub fn deo_report(intervals: usize, radius: usize, out: &Path) -> Result<DeoOrderingReport> {
    let report = deo_ordering_report(intervals, radius)?;
    create_dir(out)?;
    write_json(&out.join("deo_report.json"), &report)?;
    Ok(report)
}

#[derive(Serialize)]
pub struct DdmSummary {
    pub k: [f64; 4],
    pub size: usize,
    pub min: f64,
    pub max: f64,
}

pub fn ddm(k: [f64; 4], size: usize, out: &Path) -> Result<DdmSummary> {
    let params = DistortionParams::unchecked(k);
    let map = compute_ddm(&params, &RadialGeometry::square(size))?;
    let tmp = partial_path(out);
    map.save_png(&tmp)?;
    finish(&tmp, out)?;
    let summary = DdmSummary {
        k,
        size,
        min: map.min,
        max: map.max,
    };
    write_json(&out.with_extension("json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
pub struct SliceSummary {
    pub mode: SlicingMode,
    pub size: usize,
    pub patches: usize,
    pub pixel_counts: Vec<usize>,
    pub covered: usize,
    pub disk_pixels: usize,
}

pub fn slice_debug(mode: SlicingMode, count: usize, size: usize, out: &Path) -> Result<SliceSummary> {
    let part = Partition::build(mode, size, count)?;
    create_dir(out)?;
    part.dump_debug(out)?;
    Ok(SliceSummary {
        mode,
        size,
        patches: part.len(),
        pixel_counts: part.region_sizes(),
        covered: part.covered(),
        disk_pixels: RadialGeometry::square(size).disk_mask().iter().filter(|&&m| m).count(),
    })
}

pub fn train_run(cfg: &RunConfig) -> Result<TrainReport> {
    let data_dir = cfg.data.as_ref().context("no dataset given (set `data`)")?;
    let out = cfg.out.as_ref().context("no output directory given (set `out`)")?;
    let data = Dataset::open(data_dir).with_context(|| format!("opening dataset {}", data_dir.display()))?;
    create_dir(out)?;
    std::fs::write(out.join("run.conf"), cfg.to_kv())?;
    let (_, report) = train(&cfg.train, &data, Some(out))?;
    Ok(report)
}

pub enum ParamSource {
    Checkpoint(PathBuf),
    Explicit([f64; 4]),
}

#[derive(Serialize)]
pub struct RectifySummary {
    pub output: PathBuf,
    pub raw: [f64; 4],
    /// Present when all coefficients are positive.
    pub normalized: Option<[f64; 4]>,
    pub source: String,
    pub resolution: usize,
    pub hole_fraction: f64,
}

/// Crops `input` to its inscribed disk (resized to the model's resolution
/// when a checkpoint is used), obtains coefficients, and writes the
/// splat-and-fill rectification.
pub fn rectify(input: &Path, source: &ParamSource, out: &Path) -> Result<RectifySummary> {
    let img = Image::load(input)?;
    let (cropped, params, label) = match source {
        ParamSource::Checkpoint(ckpt) => {
            let model = Fishformer::<f32>::load(ckpt)?;
            let size = model.config().image_size;
            let cropped = crop_to_disk(&img, size)?;
            let pred = model.predict(&cropped)?;
            (
                cropped,
                DistortionParams::from_normalized(pred.global),
                ckpt.display().to_string(),
            )
        }
        ParamSource::Explicit(k) => {
            let cropped = crop_to_disk(&img, img.width().min(img.height()))?;
            (cropped, DistortionParams::unchecked(*k), "explicit".to_string())
        }
    };
    let size = cropped.width();
    let pc = rectify_splat(&cropped, &params, &RadialGeometry::square(size))?;
    save_png(&pc.ic, out)?;
    let summary = RectifySummary {
        output: out.to_path_buf(),
        raw: params.k,
        normalized: params.normalized().ok(),
        source: label,
        resolution: size,
        hole_fraction: pc.hole_fraction(),
    };
    write_json(&out.with_extension("json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: Option<MetricReport>,
    /// Files present in only one directory.
    pub unpaired: Vec<String>,
}

fn image_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            let lower = n.to_ascii_lowercase();
            lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
        })
        .collect();
    names.sort();
    Ok(names)
}

/// Full-frame PSNR, SSIM and MS-SSIM for every file name present in both
/// directories.
pub fn eval(pred_dir: &Path, gt_dir: &Path, allow_missing: bool, out: Option<&Path>) -> Result<EvalReport> {
    let pred = image_names(pred_dir)?;
    let gt = image_names(gt_dir)?;
    let unpaired: Vec<String> = pred
        .iter()
        .filter(|n| !gt.contains(n))
        .chain(gt.iter().filter(|n| !pred.contains(n)))
        .cloned()
        .collect();
    let mut rows = Vec::new();
    for name in pred.iter().filter(|n| gt.contains(n)) {
        let a = Image::load(pred_dir.join(name))?;
        let b = Image::load(gt_dir.join(name))?;
        let metrics = MetricReport::compute(&a, &b).with_context(|| format!("comparing {name}"))?;
        rows.push(EvalRow {
            name: name.clone(),
            metrics,
        });
    }
    let metrics: Vec<MetricReport> = rows.iter().map(|r| r.metrics).collect();
    let report = EvalReport {
        mean: MetricReport::mean(&metrics),
        rows,
        unpaired,
    };
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    if !report.unpaired.is_empty() && !allow_missing {
        bail!("unpaired files: {}", report.unpaired.join(", "));
    }
    ensure!(!report.rows.is_empty(), "no image pairs found");
    Ok(report)
}

#[derive(Serialize)]
pub struct GradcheckSummary {
    pub per_op_tolerance: f64,
    pub end_to_end_tolerance: f64,
    pub ops: Vec<(String, GradCheckReport)>,
    pub end_to_end: GradCheckReport,
    pub passed: bool,
}

pub const PER_OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// The 32×32, 2-block, 8-channel configuration of the end-to-end check.
pub fn gradcheck_model() -> FishformerConfig {
    FishformerConfig {
        image_size: 32,
        blocks: 2,
        rings: 4,
        channels: 8,
        heads: 2,
        ..Default::default()
    }
}

pub fn gradcheck(seed: u64, fraction: f64) -> Result<GradcheckSummary> {
    let ops: Vec<(String, GradCheckReport)> = op_suite(seed)?.into_iter().map(|(n, r)| (n.to_string(), r)).collect();
    let end_to_end = end_to_end_gradcheck(&gradcheck_model(), seed, fraction)?;
    let passed = ops.iter().all(|(_, r)| r.passes(PER_OP_TOLERANCE)) && end_to_end.passes(END_TO_END_TOLERANCE);
    Ok(GradcheckSummary {
        per_op_tolerance: PER_OP_TOLERANCE,
        end_to_end_tolerance: END_TO_END_TOLERANCE,
        ops,
        end_to_end,
        passed,
    })
}
