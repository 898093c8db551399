//! The rectification network.
//!
//! A 1×1 embedding lifts the image to `c` channels. Block `b` works at
//! resolution `S/2^b` with `c·2^b` channels: it slices the dense map into
//! patch tokens, runs two windowed transformer layers, recovers the tokens
//! into the dense map (residually) and downsamples for the next block. A mean
//! pool and a three-layer head give the global parameters.
//!
//! The layer attention chain (LAM) cross-attends adjacent blocks' tokens.
//! Stage `s` takes a query in block `s−1`'s token shape (block 0's tokens for
//! the first stage) and block `s`'s tokens, resized to that shape along the
//! patch axis with a learned channel projection. The stage output, resized to
//! block `s`'s token shape, becomes the next query. A shared three-layer head
//! reads per-patch parameters from the first stage's output.

mod layers;
mod params;

pub use layers::{
    attention, interpolation_matrix, Downsample, Head, LayerNorm, LeFF, LeWinLayer, Linear, WindowAttention,
};
pub use params::{read_checkpoint, trunc_normal, write_checkpoint, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::slicing::{self, Partition, SlicingMode, TOKENS};

/// Which attention inputs of a LAM stage come from the previous stage (the
/// first block's tokens at stage one); the rest come from the next block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LamCombo {
    Q,
    K,
    V,
    Kv,
    Qv,
    Qk,
}

impl LamCombo {
    pub const ALL: [LamCombo; 6] = [Self::Q, Self::K, Self::V, Self::Kv, Self::Qv, Self::Qk];

    /// (q, k, v) drawn from the previous stage.
    pub fn from_previous(self) -> (bool, bool, bool) {
        match self {
            Self::Q => (true, false, false),
            Self::K => (false, true, false),
            Self::V => (false, false, true),
            Self::Kv => (false, true, true),
            Self::Qv => (true, false, true),
            Self::Qk => (true, true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::Kv => "kv",
            Self::Qv => "qv",
            Self::Qk => "qk",
        }
    }
}

impl FromStr for LamCombo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown LAM combination {s:?} (q|k|v|kv|qv|qk)")))
    }
}

/// `SkipLayer` adds each stage's query to its attention output (a skip
/// connection across the stage); `LayerByLayer` passes the attention output
/// alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LamChain {
    LayerByLayer,
    SkipLayer,
}

impl std::fmt::Display for LamChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LayerByLayer => "layer-by-layer",
            Self::SkipLayer => "skip-layer",
        })
    }
}

impl FromStr for LamChain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer-by-layer" => Ok(Self::LayerByLayer),
            "skip-layer" => Ok(Self::SkipLayer),
            _ => Err(Error::Config(format!(
                "unknown LAM chaining {s:?} (layer-by-layer|skip-layer)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FishformerConfig {
    pub image_size: usize,
    pub blocks: usize,
    /// Patches at full resolution: rings (annulus) or tiles (square, a
    /// perfect square). Halved per block, minimum 1.
    pub rings: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub slicing: SlicingMode,
    pub lam_combo: LamCombo,
    pub lam_chain: LamChain,
    /// Add each LAM stage output to the matching block's tokens.
    pub deliver: bool,
}

impl Default for FishformerConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            blocks: 5,
            rings: 16,
            channels: 16,
            heads: 2,
            ffn_ratio: 2,
            slicing: SlicingMode::Annulus,
            lam_combo: LamCombo::Q,
            lam_chain: LamChain::SkipLayer,
            deliver: false,
        }
    }
}

impl FishformerConfig {
    pub fn resolution(&self, block: usize) -> usize {
        self.image_size >> block
    }

    pub fn block_channels(&self, block: usize) -> usize {
        self.channels << block
    }

    /// Patch count at `block`: rings halve; square grids halve per side.
    pub fn patches(&self, block: usize) -> usize {
        match self.slicing {
            SlicingMode::Annulus => (self.rings >> block).max(1),
            SlicingMode::Square => {
                let g = ((self.rings as f64).sqrt().round() as usize >> block).max(1);
                g * g
            }
        }
    }

    pub fn partition(&self, block: usize) -> Result<Partition> {
        Partition::build(self.slicing, self.resolution(block), self.patches(block))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks < 2 {
            return bad(format!(
                "need at least 2 blocks for layer attention, got {}",
                self.blocks
            ));
        }
        if self.rings == 0 || self.channels == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return bad("rings, channels, heads and ffn_ratio must be positive".into());
        }
        if !self.image_size.is_multiple_of(1 << (self.blocks - 1)) || self.resolution(self.blocks - 1) < 2 {
            return bad(format!(
                "image size {} cannot be halved {} times",
                self.image_size,
                self.blocks - 1
            ));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return bad(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            ));
        }
        for b in 0..self.blocks {
            self.partition(b)
                .map_err(|e| Error::Config(format!("block {b}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    slice_fw: Vec<Option<usize>>,
    slice_inv: Vec<Option<usize>>,
    layers: [LeWinLayer; 2],
}

#[derive(Clone, Debug)]
struct LamStage {
    norm_prev: LayerNorm,
    norm_next: LayerNorm,
    /// Block `s` channels → block `s−1` channels.
    up_channels: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    /// Block `s−1` channels → block `s` channels, when the output is used.
    down_channels: Option<Linear>,
    up_patches: Tensor<f64>,
    down_patches: Tensor<f64>,
}

/// Result of a forward pass.
pub struct Output<'g, T: Scalar> {
    /// Normalized global parameters, shape `(4)`.
    pub global: Var<'g, T>,
    /// Normalized per-patch parameters, shape `(n, 4)`.
    pub patches: Var<'g, T>,
    /// Every attention weight tensor, `(patches, heads, 64, 64)`.
    pub attention: Vec<Var<'g, T>>,
}

/// Detached prediction for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub global: [f64; 4],
    pub patches: Vec<[f64; 4]>,
}

#[derive(Clone, Debug)]
pub struct Fishformer<T: Scalar> {
    config: FishformerConfig,
    store: ParamStore<T>,
    partitions: Vec<Partition>,
    embed: Linear,
    blocks: Vec<Block>,
    downs: Vec<Downsample>,
    lam: Vec<LamStage>,
    global_head: Head,
    patch_head: Head,
}

pub const HEAD_HIDDEN: [usize; 2] = [128, 64];

impl<T: Scalar> Fishformer<T> {
    pub fn new(config: FishformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = config.channels;
        let embed = Linear::new(&mut store, &mut rng, "embed", 3, c0, true);
        let mut partitions = Vec::new();
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for b in 0..config.blocks {
            let part = config.partition(b)?;
            let c = config.block_channels(b);
            let (mut slice_fw, mut slice_inv) = (Vec::new(), Vec::new());
            for (t, shapes) in part.projection_shapes().into_iter().enumerate() {
                match shapes {
                    Some((fw, inv)) => {
                        slice_fw.push(Some(
                            store.add(format!("block{b}.slice.fw{t}"), trunc_normal(&mut rng, &fw, fw[1])),
                        ));
                        slice_inv.push(Some(
                            store.add(format!("block{b}.slice.inv{t}"), trunc_normal(&mut rng, &inv, inv[1])),
                        ));
                    }
                    None => {
                        slice_fw.push(None);
                        slice_inv.push(None);
                    }
                }
            }
            let layers = [0, 1].map(|l| {
                LeWinLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("block{b}.layer{l}"),
                    c,
                    config.heads,
                    config.ffn_ratio,
                )
            });
            blocks.push(Block {
                slice_fw,
                slice_inv,
                layers,
            });
            if b + 1 < config.blocks {
                downs.push(Downsample::new(&mut store, &mut rng, &format!("down{b}"), c));
            }
            partitions.push(part);
        }
        let stages = if config.deliver { config.blocks - 1 } else { 1 };
        let mut lam = Vec::new();
        for s in 1..=stages {
            let (cp, cn) = (config.block_channels(s - 1), config.block_channels(s));
            let (np, nn) = (partitions[s - 1].len(), partitions[s].len());
            let name = format!("lam{s}");
            let needs_down = config.deliver || s < stages;
            lam.push(LamStage {
                norm_prev: LayerNorm::new(&mut store, &format!("{name}.norm_prev"), cp),
                norm_next: LayerNorm::new(&mut store, &format!("{name}.norm_next"), cp),
                up_channels: Linear::new(&mut store, &mut rng, &format!("{name}.up"), cn, cp, true),
                q: Linear::new(&mut store, &mut rng, &format!("{name}.q"), cp, cp, true),
                k: Linear::new(&mut store, &mut rng, &format!("{name}.k"), cp, cp, true),
                v: Linear::new(&mut store, &mut rng, &format!("{name}.v"), cp, cp, true),
                out: Linear::new(&mut store, &mut rng, &format!("{name}.out"), cp, cp, true),
                down_channels: needs_down
                    .then(|| Linear::new(&mut store, &mut rng, &format!("{name}.down"), cp, cn, true)),
                up_patches: interpolation_matrix(np, nn),
                down_patches: interpolation_matrix(nn, np),
            });
        }
        let c_last = config.block_channels(config.blocks - 1);
        let global_head = Head::new(
            &mut store,
            &mut rng,
            "head.global",
            [c_last, HEAD_HIDDEN[0], HEAD_HIDDEN[1], 4],
        );
        let patch_head = Head::new(
            &mut store,
            &mut rng,
            "head.patch",
            [TOKENS * c0, HEAD_HIDDEN[0], HEAD_HIDDEN[1], 4],
        );
        Ok(Self {
            config,
            store,
            partitions,
            embed,
            blocks,
            downs,
            lam,
            global_head,
            patch_head,
        })
    }

    pub fn config(&self) -> &FishformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    /// Number of patch predictions per image.
    pub fn patch_count(&self) -> usize {
        self.partitions[0].len()
    }

    pub fn cast<U: Scalar>(&self) -> Fishformer<U> {
        Fishformer {
            config: self.config.clone(),
            store: self.store.cast(),
            partitions: self.partitions.clone(),
            embed: self.embed.clone(),
            blocks: self.blocks.clone(),
            downs: self.downs.clone(),
            lam: self.lam.clone(),
            global_head: self.global_head.clone(),
            patch_head: self.patch_head.clone(),
        }
    }

    /// Image `(S, S, 3)` → global and per-patch normalized parameters.
    /// `p` are this model's bound parameters (see [`ParamStore::bind`]).
    pub fn forward<'g>(&self, g: &'g Graph<T>, p: &[Var<'g, T>], image: &Var<'g, T>) -> Result<Output<'g, T>> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Shape {
                op: "fishformer input",
                lhs: image.shape(),
                rhs: vec![s, s, 3],
            });
        }
        let mut attn = Vec::new();
        let mut feat = self.embed.forward(p, image)?;
        let mut query: Option<Var<'g, T>> = None;
        let mut first_stage = None;
        for (b, block) in self.blocks.iter().enumerate() {
            let part = &self.partitions[b];
            let fw: Vec<_> = block.slice_fw.iter().map(|i| i.map(|i| p[i])).collect();
            let inv: Vec<_> = block.slice_inv.iter().map(|i| i.map(|i| p[i])).collect();
            let mut tokens = slicing::slice(&feat, part, &fw)?;
            for layer in &block.layers {
                let (t, probs) = layer.forward(p, &tokens)?;
                tokens = t;
                attn.push(probs);
            }
            if !tokens.value().all_finite() {
                return Err(Error::Numeric(format!("non-finite activations in block {b}")));
            }
            let q = query.take().unwrap_or(tokens);
            if b == 0 {
                query = Some(q);
            } else if let Some(stage) = self.lam.get(b - 1) {
                let (out, next, probs) = self.lam_stage(g, p, stage, &q, &tokens)?;
                attn.push(probs);
                if b == 1 {
                    first_stage = Some(out);
                }
                if let Some(next) = next {
                    if self.config.deliver {
                        tokens = tokens.add(&next)?;
                    }
                    query = Some(next);
                }
            }
            feat = feat.add(&slicing::recover(&tokens, part, &inv)?)?;
            if let Some(down) = self.downs.get(b) {
                feat = down.forward(p, &feat)?;
            }
        }
        let fs = feat.shape();
        let pooled = feat
            .reshape(&[fs[0] * fs[1], fs[2]])?
            .mean_axis(0)?
            .reshape(&[1, fs[2]])?;
        let global = self.global_head.forward(p, &pooled)?.reshape(&[4])?;
        let first = first_stage.expect("at least one LAM stage");
        let n = first.shape()[0];
        let patches = self
            .patch_head
            .forward(p, &first.reshape(&[n, TOKENS * self.config.channels])?)?;
        if !global.value().all_finite() || !patches.value().all_finite() {
            return Err(Error::Numeric("non-finite parameter prediction".into()));
        }
        Ok(Output {
            global,
            patches,
            attention: attn,
        })
    }

    /// Returns (stage output in the query's shape, output resized to the
    /// next block's token shape if used, attention weights).
    #[allow(clippy::type_complexity)]
    fn lam_stage<'g>(
        &self,
        g: &'g Graph<T>,
        p: &[Var<'g, T>],
        stage: &LamStage,
        query: &Var<'g, T>,
        tokens: &Var<'g, T>,
    ) -> Result<(Var<'g, T>, Option<Var<'g, T>>, Var<'g, T>)> {
        let qs = query.shape();
        let (np, cp) = (qs[0], qs[2]);
        let ts = tokens.shape();
        let (nn, cn) = (ts[0], ts[2]);
        let up = g.constant(stage.up_patches.cast());
        let resized = up
            .matmul(&tokens.reshape(&[nn, TOKENS * cn])?)?
            .reshape(&[np, TOKENS, cn])?;
        let next = stage.norm_next.forward(p, &stage.up_channels.forward(p, &resized)?)?;
        let prev = stage.norm_prev.forward(p, query)?;
        let (fq, fk, fv) = self.config.lam_combo.from_previous();
        let pick = |from_prev: bool| if from_prev { prev } else { next };
        let heads = self.config.heads;
        let q = layers::split_heads(&stage.q.forward(p, &pick(fq))?, heads)?;
        let k = layers::split_heads(&stage.k.forward(p, &pick(fk))?, heads)?;
        let v = layers::split_heads(&stage.v.forward(p, &pick(fv))?, heads)?;
        let (att, probs) = attention(&q, &k, &v)?;
        let mut out = stage.out.forward(p, &layers::merge_heads(&att)?)?;
        if self.config.lam_chain == LamChain::SkipLayer {
            out = out.add(query)?;
        }
        let down = match &stage.down_channels {
            Some(proj) => {
                let m = g.constant(stage.down_patches.cast());
                let r = m
                    .matmul(&out.reshape(&[np, TOKENS * cp])?)?
                    .reshape(&[nn, TOKENS, cp])?;
                Some(proj.forward(p, &r)?)
            }
            None => None,
        };
        Ok((out, down, probs))
    }

    /// Inference on one image without gradient tracking.
    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let x = g.constant(image_tensor(image)?);
        let out = self.forward(&g, &p, &x)?;
        let gl = out.global.data();
        Ok(Prediction {
            global: [0, 1, 2, 3].map(|i| gl[i].as_f64()),
            patches: out
                .patches
                .data()
                .chunks(4)
                .map(|r| [0, 1, 2, 3].map(|i| r[i].as_f64()))
                .collect(),
        })
    }

    /// Writes the parameters (as f32) and a JSON config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.store.cast())?;
        let side = config_sidecar(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = config_sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: FishformerConfig = serde_json::from_str(&text)?;
        let stored = read_checkpoint(path)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_from(&stored.cast())?;
        Ok(model)
    }
}

/// `model.ffwt` → `model.config.json`.
pub fn config_sidecar(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

/// `(S, S, 3)` tensor of an RGB image.
pub fn image_tensor<T: Scalar>(image: &Image) -> Result<Tensor<T>> {
    if image.channels() != 3 {
        return Err(Error::contract(format!(
            "expected an RGB image, got {} channels",
            image.channels()
        )));
    }
    Tensor::new(
        [image.height(), image.width(), 3],
        image.data().iter().map(|&v| T::of(v as f64)).collect(),
    )
}

#[cfg(test)]
mod tests;
