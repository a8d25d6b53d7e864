//! Metrics reports: per-sample scores, region summaries, and Table-shaped CSV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::domain::Region;
use crate::error::{Error, Result};
use crate::metrics::{score, BinaryMask, Hd95Mode, RegionScore, CONVENTIONS};
use crate::model::{predict, Network};
use crate::tensor::ParamStore;
use crate::Scalar;

/// One evaluated item: a slice, or a whole subject in volume mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub subject: String,
    /// `None` in volume mode.
    pub slice: Option<usize>,
    /// WT, TC, ET.
    pub scores: [RegionScore; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dice: f64,
    /// Mean over items where HD95 is defined; `None` if it never is.
    pub hd95: Option<f64>,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fingerprint: String,
    pub conventions: String,
    pub hd95_mode: Hd95Mode,
    pub volume_level: bool,
    pub items: usize,
    /// WT, TC, ET.
    pub regions: [Summary; 3],
    /// Arithmetic mean of the three region summaries.
    pub mean: Summary,
    /// Items with undefined HD95, per region.
    pub hd95_undefined: [usize; 3],
    pub per_sample: Vec<SampleRow>,
}

/// Column header shared by report and ablation CSVs.
pub fn table_header() -> String {
    let mut cols = vec!["model".to_string()];
    for metric in ["dice", "hd95", "sensitivity"] {
        for r in ["wt", "tc", "et", "mean"] {
            cols.push(format!("{metric}_{r}"));
        }
    }
    cols.join(",")
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricsReport {
    /// Builds a report from `(subject, slice, prediction, target)` items.
    pub fn from_masks(
        items: &[(String, Option<usize>, [BinaryMask; 3], [BinaryMask; 3])],
        mode: Hd95Mode,
        volume_level: bool,
        fingerprint: &str,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("evaluation split has zero samples".into()));
        }
        let per_sample = items
            .iter()
            .map(|(subject, slice, pred, target)| {
                let mut scores = Vec::with_capacity(3);
                for r in Region::ALL {
                    scores.push(score(&pred[r.index()], &target[r.index()], mode)?);
                }
                Ok(SampleRow { subject: subject.clone(), slice: *slice, scores: scores.try_into().expect("three regions") })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut hd95_undefined = [0; 3];
        let regions = Region::ALL.map(|r| {
            let i = r.index();
            let defined: Vec<f64> = per_sample.iter().filter_map(|s| s.scores[i].hd95).collect();
            hd95_undefined[i] = per_sample.len() - defined.len();
            Summary {
                dice: mean(per_sample.iter().map(|s| s.scores[i].dice)),
                hd95: (!defined.is_empty()).then(|| mean(defined.iter().copied())),
                sensitivity: mean(per_sample.iter().map(|s| s.scores[i].sensitivity)),
            }
        });
        let mean_summary = Summary {
            dice: mean(regions.iter().map(|s| s.dice)),
            hd95: regions.iter().map(|s| s.hd95).collect::<Option<Vec<f64>>>().map(mean),
            sensitivity: mean(regions.iter().map(|s| s.sensitivity)),
        };
        Ok(Self {
            fingerprint: fingerprint.to_string(),
            conventions: CONVENTIONS.to_string(),
            hd95_mode: mode,
            volume_level,
            items: per_sample.len(),
            regions,
            mean: mean_summary,
            hd95_undefined,
            per_sample,
        })
    }

    /// One CSV row in [`table_header`] order.
    pub fn table_row(&self, model: &str) -> String {
        let all = [self.regions[0], self.regions[1], self.regions[2], self.mean];
        let mut row = vec![model.to_string()];
        row.extend(all.iter().map(|s| s.dice.to_string()));
        row.extend(all.iter().map(|s| cell(s.hd95)));
        row.extend(all.iter().map(|s| s.sensitivity.to_string()));
        row.join(",")
    }

    /// Header, one row, and comment lines with the fingerprint and conventions.
    pub fn table_csv(&self, model: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# fingerprint={}", self.fingerprint);
        let _ = writeln!(out, "# conventions: {}; hd95 mode {:?}", self.conventions, self.hd95_mode);
        let _ = writeln!(out, "# hd95_undefined wt={} tc={} et={}", self.hd95_undefined[0], self.hd95_undefined[1], self.hd95_undefined[2]);
        let _ = writeln!(out, "{}", table_header());
        let _ = writeln!(out, "{}", self.table_row(model));
        out
    }

    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("subject,slice");
        for r in Region::ALL {
            let k = r.key();
            let _ = write!(out, ",dice_{k},hd95_{k},sensitivity_{k}");
        }
        out.push('\n');
        for s in &self.per_sample {
            let _ = write!(out, "{},{}", s.subject, s.slice.map_or_else(|| "all".into(), |v| v.to_string()));
            for sc in &s.scores {
                let _ = write!(out, ",{},{},{}", sc.dice, cell(sc.hd95), sc.sensitivity);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Thresholds the network's predictions on `samples` and scores them. In volume mode,
/// consecutive slices of one subject are stacked first.
pub fn evaluate<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    samples: &[SliceSample],
    mode: Hd95Mode,
    volume_level: bool,
    fingerprint: &str,
) -> Result<MetricsReport> {
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = predict(net, store, &s.image_as::<T>())?;
        let pred = [0, 1, 2].map(|r| BinaryMask::from_probs(&probs[r]));
        items.push((s.subject.clone(), Some(s.index), pred, s.masks.clone()));
    }
    let items = if volume_level { stack_by_subject(items)? } else { items };
    MetricsReport::from_masks(&items, mode, volume_level, fingerprint)
}

type Item = (String, Option<usize>, [BinaryMask; 3], [BinaryMask; 3]);

fn stack_by_subject(items: Vec<Item>) -> Result<Vec<Item>> {
    let mut groups: Vec<(String, Vec<Item>)> = Vec::new();
    for item in items {
        match groups.last_mut() {
            Some((subject, g)) if *subject == item.0 => g.push(item),
            _ => groups.push((item.0.clone(), vec![item])),
        }
    }
    groups
        .into_iter()
        .map(|(subject, g)| {
            let stack = |pick: &dyn Fn(&Item) -> &[BinaryMask; 3]| -> Result<[BinaryMask; 3]> {
                let mut out = Vec::with_capacity(3);
                for r in 0..3 {
                    out.push(BinaryMask::stack(&g.iter().map(|it| pick(it)[r].clone()).collect::<Vec<_>>())?);
                }
                Ok(out.try_into().expect("three regions"))
            };
            Ok((subject.clone(), None, stack(&|it| &it.2)?, stack(&|it| &it.3)?))
        })
        .collect()
}
