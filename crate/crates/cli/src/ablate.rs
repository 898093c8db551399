//! Ablation sweeps: one training run per setting of an axis, all on the same
//! dataset and seed.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use fishformer_core::data::Dataset;
use fishformer_core::net::{FishformerConfig, LamChain, LamCombo};
use fishformer_core::slicing::SlicingMode;
use fishformer_core::train::{train, TrainConfig};

use crate::commands::write_json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Slicing,
    LamCombo,
    LamWay,
    Depth,
}

impl FromStr for Axis {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "slicing" => Self::Slicing,
            "lam-combo" => Self::LamCombo,
            "lam-way" => Self::LamWay,
            "depth" => Self::Depth,
            _ => bail!("unknown ablation axis {s:?} (slicing|lam-combo|lam-way|depth)"),
        })
    }
}

/// Row labels and model configs for an axis, derived from `base`.
pub fn settings(axis: Axis, base: &FishformerConfig) -> Vec<(String, FishformerConfig)> {
    let with = |f: &dyn Fn(&mut FishformerConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Slicing => [SlicingMode::Square, SlicingMode::Annulus]
            .into_iter()
            .flat_map(|mode| {
                [1, 4, 16, 64].map(|n| {
                    (
                        format!("{mode} {n}"),
                        with(&|c| {
                            c.slicing = mode;
                            c.rings = n;
                        }),
                    )
                })
            })
            .collect(),
        Axis::LamCombo => LamCombo::ALL
            .iter()
            .map(|&combo| (format!("{} from layer I", combo.name()), with(&|c| c.lam_combo = combo)))
            .collect(),
        Axis::LamWay => vec![
            ("w deliver".into(), with(&|c| c.deliver = true)),
            ("w/o deliver".into(), with(&|c| c.deliver = false)),
            ("w skip".into(), with(&|c| c.lam_chain = LamChain::SkipLayer)),
            ("w/o skip".into(), with(&|c| c.lam_chain = LamChain::LayerByLayer)),
        ],
        Axis::Depth => (3..=7)
            .map(|b| (format!("{b} blocks"), with(&|c| c.blocks = b)))
            .collect(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: String,
    /// Why the setting could not be trained, if it could not.
    pub skipped: Option<String>,
    pub final_val_loss: Option<f64>,
    pub final_val_mae: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub initial_val_mae: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub seed: u64,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn markdown(&self) -> String {
        let mut s = String::from("| setting | final val loss | final val MAE | best val loss |\n|---|---|---|---|\n");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let _ = match &r.skipped {
                Some(why) => writeln!(s, "| {} | skipped: {why} | | |", r.setting),
                None => writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    r.setting,
                    f(r.final_val_loss),
                    f(r.final_val_mae),
                    f(r.best_val_loss)
                ),
            };
        }
        s
    }
}

/// Trains every setting of `axis`. Settings whose config is invalid at the
/// base resolution are reported as skipped; identical configs share a run.
pub fn run(axis: Axis, base: &TrainConfig, data: &Dataset, out: &Path) -> Result<AblationTable> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut done: Vec<(FishformerConfig, AblationRow)> = Vec::new();
    let mut rows = Vec::new();
    for (i, (label, model)) in settings(axis, &base.model).into_iter().enumerate() {
        if let Some((_, prev)) = done.iter().find(|(m, _)| *m == model) {
            rows.push(AblationRow {
                setting: label,
                ..prev.clone()
            });
            continue;
        }
        let row = match model.validate() {
            Err(e) => AblationRow {
                setting: label,
                skipped: Some(e.to_string()),
                final_val_loss: None,
                final_val_mae: None,
                best_val_loss: None,
                initial_val_mae: None,
            },
            Ok(()) => {
                let cfg = TrainConfig {
                    model: model.clone(),
                    ..base.clone()
                };
                log::info!("ablation {axis:?}: training {label}");
                let (_, report) = train(&cfg, data, Some(&out.join(format!("run{i:02}"))))?;
                let last = report.final_val();
                AblationRow {
                    setting: label,
                    skipped: None,
                    final_val_loss: Some(last.total),
                    final_val_mae: Some(last.mae),
                    best_val_loss: Some(report.best_val_loss),
                    initial_val_mae: Some(report.initial_val_mae()),
                }
            }
        };
        done.push((model, row.clone()));
        rows.push(row);
    }
    let table = AblationTable {
        axis,
        seed: base.seed,
        epochs: base.epochs,
        rows,
    };
    write_json(&out.join("ablation.json"), &table)?;
    std::fs::write(out.join("ablation.md"), table.markdown())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_rows() {
        let base = FishformerConfig::default();
        let slicing = settings(Axis::Slicing, &base);
        assert_eq!(slicing.len(), 8);
        assert_eq!(slicing[0].0, "square 1");
        assert_eq!(slicing[7].0, "annulus 64");
        assert_eq!(settings(Axis::LamCombo, &base).len(), 6);
        assert_eq!(settings(Axis::LamWay, &base).len(), 4);
        let depth: Vec<usize> = settings(Axis::Depth, &base).iter().map(|(_, c)| c.blocks).collect();
        assert_eq!(depth, vec![3, 4, 5, 6, 7]);
        assert!("widths".parse::<Axis>().is_err());
    }
}
