//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment; keys may use `-` or `_`.
//!
//! ```text
//! # model
//! image_size = 64
//! blocks = 3
//! rings = 8
//! slicing = annulus
//! # optimizer
//! learning_rate = 1e-3
//! epochs = 30
//! data = runs/data
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fishformer_core::train::TrainConfig;

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "image_size",
    "blocks",
    "rings",
    "channels",
    "heads",
    "ffn_ratio",
    "slicing",
    "lam_combo",
    "lam_chain",
    "deliver",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "beta1",
    "beta2",
    "eps",
    "data",
    "out",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn normalize_key(k: &str) -> String {
    let k = k.trim().replace('-', "_");
    if k == "lr" {
        "learning_rate".into()
    } else {
        k
    }
}

/// Parses `key = value` lines, rejecting unknown and repeated keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", no + 1))?;
        let key = normalize_key(k);
        if !KEYS.contains(&key.as_str()) {
            bail!("line {}: unknown key {key:?}", no + 1);
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("line {}: {key:?} set twice", no + 1);
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key} = {value:?}: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let m = &mut self.train.model;
        match key.as_str() {
            "image_size" => m.image_size = parse(&key, value)?,
            "blocks" => m.blocks = parse(&key, value)?,
            "rings" => m.rings = parse(&key, value)?,
            "channels" => m.channels = parse(&key, value)?,
            "heads" => m.heads = parse(&key, value)?,
            "ffn_ratio" => m.ffn_ratio = parse(&key, value)?,
            "slicing" => m.slicing = parse(&key, value)?,
            "lam_combo" => m.lam_combo = parse(&key, value)?,
            "lam_chain" => m.lam_chain = parse(&key, value)?,
            "deliver" => m.deliver = parse(&key, value)?,
            "learning_rate" => self.train.learning_rate = parse(&key, value)?,
            "batch_size" => self.train.batch_size = parse(&key, value)?,
            "epochs" => self.train.epochs = parse(&key, value)?,
            "seed" => self.train.seed = parse(&key, value)?,
            "beta1" => self.train.beta1 = parse(&key, value)?,
            "beta2" => self.train.beta2 = parse(&key, value)?,
            "eps" => self.train.eps = parse(&key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as given with `--set`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_kv(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_kv(&self) -> String {
        let m = &self.train.model;
        let t = &self.train;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("image_size", m.image_size.to_string());
        line("blocks", m.blocks.to_string());
        line("rings", m.rings.to_string());
        line("channels", m.channels.to_string());
        line("heads", m.heads.to_string());
        line("ffn_ratio", m.ffn_ratio.to_string());
        line("slicing", m.slicing.to_string());
        line("lam_combo", m.lam_combo.name().to_string());
        line("lam_chain", m.lam_chain.to_string());
        line("deliver", m.deliver.to_string());
        line("learning_rate", format!("{:e}", t.learning_rate));
        line("batch_size", t.batch_size.to_string());
        line("epochs", t.epochs.to_string());
        line("seed", t.seed.to_string());
        line("beta1", t.beta1.to_string());
        line("beta2", t.beta2.to_string());
        line("eps", format!("{:e}", t.eps));
        if let Some(d) = &self.data {
            line("data", d.display().to_string());
        }
        if let Some(o) = &self.out {
            line("out", o.display().to_string());
        }
        s
    }
}
