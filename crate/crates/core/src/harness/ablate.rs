//! Trains every variant on identical data and compares them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::Dataset;
use super::eval::{evaluate, table_header, MetricsReport};
use super::train::train;
use crate::data::{SliceSample, Split};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub config_fingerprint: String,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub data_fingerprint: String,
    pub split: Split,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean_dice(&self, v: Variant) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == v).map(|r| r.report.mean.dice)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# data_fingerprint={}", self.data_fingerprint);
        let _ = writeln!(out, "{}", table_header());
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.report.table_row(r.variant.key()));
        }
        out
    }
}

/// Trains each of `variants` from `base` with the same seed and slices, then scores them on `eval_on`.
pub fn ablate_on<T: Scalar>(
    base: &RunConfig,
    variants: &[Variant],
    train_set: &[SliceSample],
    val_set: &[SliceSample],
    eval_set: &[SliceSample],
    data_fingerprint: &str,
    split: Split,
) -> Result<AblationReport> {
    if eval_set.is_empty() {
        return Err(Error::Input(format!("{} split has zero samples", split.key())));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = base.clone().with_variant(v);
        log::info!("ablation: training {}", v.key());
        let out = train::<T>(&cfg, train_set, val_set)?;
        let report = evaluate(&out.net, &out.best, eval_set, cfg.hd95, cfg.volume_metrics, &cfg.fingerprint())?;
        rows.push(AblationRow { variant: v, config_fingerprint: cfg.fingerprint(), best_epoch: out.best_epoch, report });
    }
    Ok(AblationReport { data_fingerprint: data_fingerprint.to_string(), split, rows })
}

/// All four variants on the dataset described by `base.data`, scored on the test split.
pub fn ablate<T: Scalar>(base: &RunConfig) -> Result<AblationReport> {
    let data = Dataset::from_config(&base.data)?;
    let policy = base.data.policy;
    let (tr, va, te) = (data.slices(Split::Train, policy)?, data.slices(Split::Val, policy)?, data.slices(Split::Test, policy)?);
    ablate_on::<T>(base, &Variant::ALL, &tr, &va, &te, &data.fingerprint(), Split::Test)
}
