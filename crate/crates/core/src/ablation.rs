//! Multi-seed ablations over one design axis at a time.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::corpus::{Document, LabelSet};
use crate::error::{Error, Result};
use crate::metric::{LossKind, SimilarityKind};
use crate::trainer::train;
use crate::verbalizer::Format;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Verbalization,
    Pooling,
    LossSimilarity,
    Negatives,
    Refresh,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Verbalization,
        AblationAxis::Pooling,
        AblationAxis::LossSimilarity,
        AblationAxis::Negatives,
        AblationAxis::Refresh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Verbalization => "verbalization",
            AblationAxis::Pooling => "pooling",
            AblationAxis::LossSimilarity => "loss_similarity",
            AblationAxis::Negatives => "negatives",
            AblationAxis::Refresh => "refresh",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{s}'")))
    }
}

/// A named set of configuration overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub deltas: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: impl Into<String>, deltas: &[(&str, &str)]) -> Self {
        Variant {
            name: name.into(),
            deltas: deltas
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.deltas {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub axis: AblationAxis,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    /// The standard variant grid for `axis`.
    pub fn standard(axis: AblationAxis, seeds: Vec<u64>) -> Self {
        let variants = match axis {
            AblationAxis::Verbalization => Format::ALL
                .iter()
                .map(|f| Variant::new(f.name(), &[("format", f.name())]))
                .collect(),
            AblationAxis::Pooling => vec![
                Variant::new("mean", &[("pooling", "mean")]),
                Variant::new("first_last", &[("pooling", "first_last")]),
            ],
            AblationAxis::LossSimilarity => LossKind::ALL
                .iter()
                .flat_map(|l| {
                    SimilarityKind::ALL.iter().map(move |s| {
                        Variant::new(
                            format!("{} + {}", l.name(), s.name()),
                            &[("loss", l.name()), ("similarity", s.name()), ("margin", "default")],
                        )
                    })
                })
                .collect(),
            AblationAxis::Negatives => vec![
                Variant::new("in_batch, 1", &[("negatives", "in_batch"), ("neg_count", "1")]),
                Variant::new("in_batch, dyn", &[("negatives", "in_batch"), ("neg_count", "dynamic")]),
                Variant::new("hard, 1", &[("negatives", "hard"), ("neg_count", "1")]),
                Variant::new("hard, dyn", &[("negatives", "hard"), ("neg_count", "dynamic")]),
            ],
            AblationAxis::Refresh => vec![
                Variant::new("once after epoch", &[("refresh_policy", "epoch")]),
                Variant::new("frequent + on-the-fly", &[("refresh_policy", "frequent")]),
            ],
        };
        AblationPlan {
            axis,
            variants,
            seeds,
        }
    }

    pub fn validate(&self, base: &TrainConfig) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("ablation plan has no variants".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation plan has no seeds".into()));
        }
        self.variants.iter().try_for_each(|v| v.apply(base).map(drop))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// Dev accuracy per seed, in percent.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant under every seed and reports final-epoch dev
/// accuracy as mean ± sd.
pub fn run_ablation(
    plan: &AblationPlan,
    base: &TrainConfig,
    corpus: &[Document],
    labels: &LabelSet,
    dev: &[Document],
) -> Result<AblationTable> {
    plan.validate(base)?;
    let jobs: Vec<(usize, u64)> = (0..plan.variants.len())
        .flat_map(|v| plan.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(v, seed)| -> Result<f64> {
            let mut cfg = plan.variants[v].apply(base)?;
            cfg.seed = seed;
            let outcome = train(corpus, labels, &cfg, Some(dev))?;
            Ok(outcome
                .metrics
                .last()
                .and_then(|m| m.dev_acc)
                .unwrap_or(0.0)
                * 100.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = plan
        .variants
        .iter()
        .zip(scores.chunks(plan.seeds.len()))
        .map(|(variant, s)| {
            let (mean, sd) = mean_sd(s);
            AblationRow {
                variant: variant.name.clone(),
                scores: s.to_vec(),
                mean,
                sd,
            }
        })
        .collect();
    Ok(AblationTable {
        axis: plan.axis.name().to_string(),
        rows,
    })
}

pub fn render_ablation(table: &AblationTable) -> String {
    let width = table
        .rows
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(0)
        .max(table.axis.len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>16}", table.axis, "Dev acc (%)");
    for r in &table.rows {
        let cell = format!("{:.2} ± {:.2}", r.mean, r.sd);
        let _ = writeln!(out, "{:<width$}  {:>16}", r.variant, cell);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        assert_eq!(mean_sd(&[70.0]), (70.0, 0.0));
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_plans_validate() {
        let base = TrainConfig::default();
        for axis in AblationAxis::ALL {
            let plan = AblationPlan::standard(axis, vec![1]);
            plan.validate(&base).unwrap();
        }
        assert_eq!(
            AblationPlan::standard(AblationAxis::LossSimilarity, vec![1]).variants.len(),
            6
        );
        let empty = AblationPlan {
            axis: AblationAxis::Pooling,
            variants: vec![],
            seeds: vec![1],
        };
        assert!(empty.validate(&base).is_err());
    }

    #[test]
    fn rendering() {
        let table = AblationTable {
            axis: "pooling".into(),
            rows: vec![AblationRow {
                variant: "mean".into(),
                scores: vec![90.0],
                mean: 90.0,
                sd: 0.0,
            }],
        };
        assert!(render_ablation(&table).contains("90.00 ± 0.00"));
    }
}
