//! Segmentation metrics: confusion matrix, per-class IoU, mIoU, pixel accuracy,
//! and side-by-side run comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DoucError, Result};
use crate::fusion::LabelMap;

pub const DEFAULT_IGNORE_LABEL: usize = 255;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(DoucError::shape(
                "ConfusionMatrix::from_counts",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise sum; associative and commutative.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.classes != other.classes {
            return Err(DoucError::shape(
                "ConfusionMatrix::merge",
                format!("{} vs {} classes", self.classes, other.classes),
            ));
        }
        Ok(Self {
            classes: self.classes,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_label: usize) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(DoucError::shape(
                "accumulate",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let c = self.classes;
        let mut delta = vec![0u64; c * c];
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == ignore_label {
                continue;
            }
            if g >= c || p >= c {
                return Err(DoucError::shape(
                    "accumulate",
                    format!("class pair (gt {g}, pred {p}) out of range for {c} classes"),
                ));
            }
            delta[g * c + p] += 1;
        }
        for (a, d) in self.counts.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        let mut correct = 0u64;
        for k in 0..c {
            let tp = self.get(k, k);
            let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(k, j)).sum();
            let fp: u64 = (0..c).filter(|&i| i != k).map(|i| self.get(i, k)).sum();
            let union = tp + fp + fn_;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
            correct += tp;
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean_iou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total = self.total();
        Metrics {
            per_class_iou: per_class,
            mean_iou,
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

/// Accumulates one image into `cm`, returning the updated matrix.
pub fn accumulate(
    mut cm: ConfusionMatrix,
    pred: &LabelMap,
    gt: &LabelMap,
    ignore_label: usize,
) -> Result<ConfusionMatrix> {
    cm.accumulate(pred, gt, ignore_label)?;
    Ok(cm)
}

/// Per-class IoU (`None` for classes absent from both prediction and ground
/// truth) and the mean over the remaining classes.
pub fn miou(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, f64) {
    let m = cm.metrics();
    (m.per_class_iou, m.mean_iou)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub name: String,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Against the baseline run; `None` where either side has no IoU.
    pub delta_mean_iou: f64,
    pub delta_per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: String,
    pub class_names: Vec<String>,
    pub rows: Vec<RunRow>,
}

/// Tabulates runs against the first one given; rows are sorted by name.
pub fn compare_report(runs: &[(String, Metrics)], class_names: &[String]) -> Result<CompareReport> {
    let (base_name, base) = runs
        .first()
        .ok_or_else(|| DoucError::config("runs", "at least one run is required"))?;
    let c = base.per_class_iou.len();
    if let Some((name, _)) = runs.iter().find(|(_, m)| m.per_class_iou.len() != c) {
        return Err(DoucError::shape(
            "compare_report",
            format!("run `{name}` has a different class set"),
        ));
    }
    let mut rows: Vec<RunRow> = runs
        .iter()
        .map(|(name, m)| RunRow {
            name: name.clone(),
            mean_iou: m.mean_iou,
            pixel_accuracy: m.pixel_accuracy,
            per_class_iou: m.per_class_iou.clone(),
            delta_mean_iou: m.mean_iou - base.mean_iou,
            delta_per_class: m
                .per_class_iou
                .iter()
                .zip(&base.per_class_iou)
                .map(|(a, b)| Some((*a)? - (*b)?))
                .collect(),
        })
        .collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    let class_names = if class_names.len() == c {
        class_names.to_vec()
    } else {
        (0..c).map(|k| format!("class{k}")).collect()
    };
    Ok(CompareReport {
        baseline: base_name.clone(),
        class_names,
        rows,
    })
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, IoU values in percent.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut header = vec!["run".to_string(), "mIoU".into(), "dmIoU".into(), "pAcc".into()];
        header.extend(self.class_names.iter().cloned());
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![
                r.name.clone(),
                pct(Some(r.mean_iou)),
                format!("{:+.2}", 100.0 * r.delta_mean_iou),
                pct(Some(r.pixel_accuracy)),
            ];
            line.extend(r.per_class_iou.iter().map(|&v| pct(v)));
            table.push(line);
        }
        let cols = table[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| {
                    if i == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let _ = writeln!(out, "baseline: {}", self.baseline);
        out
    }
}
