//! Adam training of the network on a built dataset.
//!
//! Gradients are accumulated sample by sample in a fixed order, so a run is
//! bit-reproducible from its config and dataset.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::correction::{raw_from_normalized, rectify_differentiable};
use crate::data::{generate_sample, Dataset, DatasetManifest, SamplingMode, TrainSample};
use crate::distortion::RadialGeometry;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::net::{image_tensor, Fishformer, FishformerConfig, Output, ParamStore};
use crate::objectives::{loss_global, loss_image, loss_local, loss_total, ConfidenceTable, LossTerms};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: FishformerConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: FishformerConfig::default(),
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, t) in store.values_mut().iter_mut().enumerate() {
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Everything the loss needs for one sample, as tensors.
pub struct SampleTensors<T: Scalar> {
    pub fisheye: Tensor<T>,
    pub gt_image: Tensor<T>,
    pub gt_params: Tensor<T>,
}

impl<T: Scalar> SampleTensors<T> {
    pub fn from_sample(s: &TrainSample) -> Result<Self> {
        Ok(Self {
            fisheye: image_tensor(&s.fisheye)?,
            gt_image: image_tensor(&s.gt)?,
            gt_params: Tensor::new([4], s.meta.normalized.iter().map(|&v| T::of(v)).collect())?,
        })
    }
}

/// Forward pass plus the three loss terms. The image term rectifies the
/// fisheye with the predicted global coefficients.
pub fn sample_losses<'g, T: Scalar>(
    model: &Fishformer<T>,
    g: &'g Graph<T>,
    p: &[Var<'g, T>],
    sample: &SampleTensors<T>,
    table: &ConfidenceTable,
) -> Result<(Output<'g, T>, LossTerms<'g, T>)> {
    let fisheye = g.constant(sample.fisheye.clone());
    let gt = g.constant(sample.gt_params.clone());
    let out = model.forward(g, p, &fisheye)?;
    let global = loss_global(&out.global, &gt)?;
    let local = loss_local(&out.patches, &gt, table)?;
    let size = model.config().image_size;
    let k = raw_from_normalized(&out.global)?;
    let (rectified, _) = rectify_differentiable(&fisheye, &k, &RadialGeometry::square(size))?;
    let image = loss_image(&rectified, &g.constant(sample.gt_image.clone()))?;
    let terms = loss_total(global, local, image)?;
    Ok((out, terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub image: f64,
    /// Mean absolute error of the normalized global prediction.
    pub mae: f64,
}

impl LossSummary {
    fn add(&mut self, terms: &LossTerms<'_, f32>, mae: f64) {
        self.total += terms.total.item().as_f64();
        self.global += terms.global.item().as_f64();
        self.local += terms.local.item().as_f64();
        self.image += terms.image.item().as_f64();
        self.mae += mae;
    }

    fn scale(&mut self, n: usize) {
        let s = 1.0 / n.max(1) as f64;
        self.total *= s;
        self.global *= s;
        self.local *= s;
        self.image *= s;
        self.mae *= s;
    }
}

fn mae(pred: &[f32], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(&p, &t)| (p as f64 - t).abs()).sum::<f64>() / 4.0
}

/// Mean losses over `samples` without updating anything.
pub fn evaluate(model: &Fishformer<f32>, samples: &[TrainSample]) -> Result<LossSummary> {
    let table = ConfidenceTable::for_partition(&model.partitions()[0])?;
    let mut sum = LossSummary::default();
    for s in samples {
        let g = Graph::new();
        let p = model.params().bind(&g, false);
        let (out, terms) = sample_losses(model, &g, &p, &SampleTensors::from_sample(s)?, &table)?;
        sum.add(&terms, mae(&out.global.data(), &s.meta.normalized));
    }
    sum.scale(samples.len());
    Ok(sum)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Absent for epoch 0, which evaluates the initialization.
    pub train: Option<LossSummary>,
    pub val: LossSummary,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub manifest_hash: String,
}

impl TrainReport {
    pub fn initial_val_mae(&self) -> f64 {
        self.history[0].val.mae
    }

    pub fn final_val(&self) -> LossSummary {
        self.history.last().expect("history starts with epoch 0").val
    }
}

/// Trains on `data.train`, validating on `data.test` after every epoch.
/// With `out_dir`, writes `config.json`, `log.jsonl`, `best.ffwt` and
/// `last.ffwt` there.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<(Fishformer<f32>, TrainReport)> {
    cfg.validate()?;
    if data.manifest.resolution != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match model image size {}",
            data.manifest.resolution, cfg.model.image_size
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Degenerate("no training samples".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("config.json");
            std::fs::write(&path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&path, e))?;
            let path = dir.join("log.jsonl");
            Some(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)
        }
        None => None,
    };
    let mut model = Fishformer::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let table = ConfidenceTable::for_partition(&model.partitions()[0])?;
    let tensors: Vec<SampleTensors<f32>> = data
        .train
        .iter()
        .map(SampleTensors::from_sample)
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(model.params(), cfg);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::new();
    let mut record = |rec: EpochRecord, log: &mut Option<std::fs::File>| -> Result<()> {
        log::info!("{}", serde_json::to_string(&rec)?);
        if let Some(f) = log {
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("log.jsonl", e))?;
        }
        history.push(rec);
        Ok(())
    };

    let start = Instant::now();
    let initial = evaluate(&model, &data.test)?;
    record(
        EpochRecord {
            epoch: 0,
            train: None,
            val: initial,
            seconds: start.elapsed().as_secs_f64(),
        },
        &mut log,
    )?;
    let (mut best_epoch, mut best_val) = (0, initial.total);
    if let Some(dir) = out_dir {
        model.save(&dir.join("best.ffwt"))?;
    }

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = LossSummary::default();
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> = model.params().values().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let g = Graph::new();
                let p = model.params().bind(&g, true);
                let (out, terms) = sample_losses(&model, &g, &p, &tensors[i], &table)?;
                let parts = [
                    terms.total.item(),
                    terms.global.item(),
                    terms.local.item(),
                    terms.image.item(),
                ];
                if parts.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_no}, sample {}: total {} global {} local {} image {}",
                        data.train[i].meta.id, parts[0], parts[1], parts[2], parts[3]
                    )));
                }
                terms.total.backward()?;
                for (acc, var) in grads.iter_mut().zip(&p) {
                    if let Some(gr) = var.grad() {
                        for (a, &v) in acc.iter_mut().zip(gr.data()) {
                            *a += v as f64 / batch.len() as f64;
                        }
                    }
                }
                epoch_sum.add(&terms, mae(&out.global.data(), &data.train[i].meta.normalized));
            }
            adam.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after epoch {epoch}, batch {batch_no}"
                )));
            }
        }
        epoch_sum.scale(order.len());
        let val = evaluate(&model, &data.test)?;
        if val.total < best_val {
            best_val = val.total;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                model.save(&dir.join("best.ffwt"))?;
            }
        }
        record(
            EpochRecord {
                epoch,
                train: Some(epoch_sum),
                val,
                seconds: t0.elapsed().as_secs_f64(),
            },
            &mut log,
        )?;
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("last.ffwt"))?;
    }
    let report = TrainReport {
        history,
        best_epoch,
        best_val_loss: best_val,
        manifest_hash: data.manifest.hash(),
    };
    if let Some(dir) = out_dir {
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok((model, report))
}

/// Central-difference check of the full loss (global, local and image
/// terms) in 64-bit on a random `fraction` of the parameters, using one
/// synthetic sample at the model's resolution.
pub fn end_to_end_gradcheck(config: &FishformerConfig, seed: u64, fraction: f64) -> Result<GradCheckReport> {
    let manifest = DatasetManifest::plan(1, 0, config.image_size, SamplingMode::LogUniform, seed, None)?;
    let sample = generate_sample(&manifest, 0, &[])?;
    let tensors = SampleTensors::<f64>::from_sample(&sample)?;
    let model = Fishformer::<f64>::new(config.clone(), seed)?;
    let table = ConfidenceTable::for_partition(&model.partitions()[0])?;
    let inputs = model.params().values().to_vec();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<(usize, usize)> = (0..((total as f64 * fraction).ceil() as usize).max(1))
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            (i, rng.gen_range(0..inputs[i].len()))
        })
        .collect();
    gradcheck::check_subset(&inputs, &entries, |g, p| {
        Ok(sample_losses(&model, g, p, &tensors, &table)?.1.total)
    })
}
