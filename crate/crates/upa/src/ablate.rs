//! Ablation sweeps over one axis with a shared seed and dataset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use upa_core::attention::Variant;
use upa_core::backbone::Arrangement;

use crate::error::{Error, Result};
use crate::train::{train_on, AttentionSetup, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    K,
    Pooling,
    Stage,
    Arrangement,
    Variant,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::K, Axis::Pooling, Axis::Stage, Axis::Arrangement, Axis::Variant];

    pub fn name(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::Pooling => "pooling",
            Axis::Stage => "stage",
            Axis::Arrangement => "arrangement",
            Axis::Variant => "variant",
        }
    }

    pub fn parse(s: &str) -> Result<Axis> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}` (k, pooling, stage, arrangement, variant)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub overall_accuracy: f64,
    pub class_miou: f64,
    pub instance_miou: Option<f64>,
    pub final_loss: f64,
    pub parameters: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn base_attention(cfg: &TrainConfig) -> AttentionSetup {
    cfg.attention.clone().unwrap_or_else(|| AttentionSetup::new(Variant::UpaPlain))
}

/// Attention setting used where the axis needs a UPA block.
fn upa_base(cfg: &TrainConfig) -> AttentionSetup {
    let mut a = base_attention(cfg);
    if !a.variant.is_upa() || matches!(a.variant, Variant::UpaUnary | Variant::UpaPairwise) {
        a.variant = Variant::UpaPlain;
    }
    a
}

/// `(label, attention)` settings swept along `axis`.
pub fn settings(axis: Axis, cfg: &TrainConfig) -> Vec<(String, Option<AttentionSetup>)> {
    let base = base_attention(cfg);
    let with = |f: &dyn Fn(&mut AttentionSetup)| {
        let mut a = base.clone();
        f(&mut a);
        Some(a)
    };
    match axis {
        Axis::K => [8, 16, 24, 32]
            .into_iter()
            .map(|k| (k.to_string(), with(&|a| a.k = k)))
            .collect(),
        Axis::Pooling => {
            let attn = if base.variant.is_upa() || base.variant == Variant::LocalSa {
                base.variant
            } else {
                Variant::UpaPlain
            };
            [("mean", Variant::MeanPool), ("max", Variant::MaxPool), ("attention", attn)]
                .into_iter()
                .map(|(l, v)| {
                    (
                        l.to_string(),
                        with(&|a| {
                            a.variant = v;
                            a.arrangement = Arrangement::Parallel;
                        }),
                    )
                })
                .collect()
        }
        Axis::Stage => {
            let s = cfg.model.stages.len();
            let mut v: Vec<(String, Option<AttentionSetup>)> = (1..=s)
                .map(|i| (format!("stage {i}"), with(&|a| a.stages = vec![i])))
                .collect();
            v.push(("all".into(), with(&|a| a.stages = (1..=s).collect())));
            v
        }
        Axis::Arrangement => Arrangement::ALL
            .into_iter()
            .map(|arr| {
                let mut a = upa_base(cfg);
                a.arrangement = arr;
                (arr.name().to_string(), Some(a))
            })
            .collect(),
        Axis::Variant => std::iter::once(("none".to_string(), None))
            .chain(Variant::ALL.into_iter().map(|v| {
                (
                    v.name().to_string(),
                    with(&|a| {
                        a.variant = v;
                        a.arrangement = Arrangement::Parallel;
                    }),
                )
            }))
            .collect(),
    }
}

/// Trains one model per setting on the same dataset and seed.
pub fn ablate(axis: Axis, base: &TrainConfig) -> Result<AblationTable> {
    let data = base.dataset()?;
    let mut rows = Vec::new();
    for (setting, attention) in settings(axis, base) {
        let cfg = TrainConfig {
            attention,
            dump_maps: false,
            ..base.clone()
        };
        let r = train_on(&cfg, &data, None)?;
        let m = r
            .final_metrics()
            .ok_or_else(|| Error::config("ablation runs need at least one epoch"))?;
        rows.push(AblationRow {
            setting,
            overall_accuracy: m.overall_accuracy,
            class_miou: m.class_miou,
            instance_miou: m.instance_miou,
            final_loss: r.history.last().map_or(f64::NAN, |e| e.train_loss),
            parameters: r.store.numel(),
            seconds: r.seconds,
        });
    }
    Ok(AblationTable {
        axis,
        seed: base.seed,
        rows,
    })
}

impl AblationTable {
    pub fn render(&self) -> String {
        let w = self.rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(self.axis.name().len());
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:>7}  {:>7}  {:>7}  {:>8}  {:>8}  {:>8}",
            self.axis.name(),
            "OA",
            "cls mIoU",
            "ins mIoU",
            "loss",
            "params",
            "seconds"
        );
        for r in &self.rows {
            let inst = r.instance_miou.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(
                s,
                "{:<w$}  {:>7.2}  {:>8.2}  {:>8}  {:>8.4}  {:>8}  {:>8.1}",
                r.setting,
                100.0 * r.overall_accuracy,
                100.0 * r.class_miou,
                inst,
                r.final_loss,
                r.parameters,
                r.seconds
            );
        }
        s
    }
}
