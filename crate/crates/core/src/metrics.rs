//! Confusion-matrix based segmentation metrics.
//!
//! One matrix is accumulated over the whole evaluation set; IoU of a class
//! with no ground truth and no prediction is undefined and left out of every
//! mean.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Count every pixel whose ground truth is not the ignore id.
    pub fn accumulate(&mut self, prediction: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<()> {
        if prediction.dim() != truth.dim() {
            return Err(Error::Dimension(format!(
                "prediction {:?} vs ground truth {:?}",
                prediction.dim(),
                truth.dim()
            )));
        }
        let k = self.num_classes;
        // validate first so a bad map leaves the matrix untouched
        for (((y, x), &p), &g) in prediction.indexed_iter().zip(truth.iter()) {
            if g == IGNORE_INDEX {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Data(format!(
                    "pixel ({y},{x}) has ground truth {g} / prediction {p}, outside 0..{k}"
                )));
            }
        }
        for (&p, &g) in prediction.iter().zip(truth.iter()) {
            if g != IGNORE_INDEX {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum; partial matrices over disjoint image sets combine
    /// into the matrix of their union.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension("confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|g| (0..self.num_classes).map(|p| self.get(g, p)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|p| (0..self.num_classes).map(|g| self.get(g, p)).sum())
            .collect()
    }

    /// `TP / (TP + FP + FN)` per class, `None` when the denominator is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let rows = self.row_sums();
        let cols = self.col_sums();
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = rows[c] + cols[c] - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let all: Vec<u8> = (0..self.num_classes).map(|c| c as u8).collect();
        self.subset_miou(&all)
    }

    /// Mean of the defined IoUs over `subset`.
    pub fn subset_miou(&self, subset: &[u8]) -> Result<f64> {
        if subset.is_empty() {
            return Err(Error::Evaluation("empty class subset".into()));
        }
        let ious = self.iou_per_class();
        let defined: Vec<f64> = subset
            .iter()
            .map(|&c| {
                ious.get(c as usize)
                    .copied()
                    .ok_or_else(|| Error::Evaluation(format!("class {c} outside the confusion matrix")))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        if defined.is_empty() {
            return Err(Error::Evaluation(format!("no class of {subset:?} has a defined IoU")));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Metrics after one step of a continual run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step_index: usize,
    /// `(class id, IoU)` for every known class, in id order.
    pub per_class_iou: Vec<(u8, Option<f64>)>,
    /// Over every class known at this step.
    pub overall_miou: f64,
    /// Over the base classes only.
    pub base_miou: f64,
    /// Over classes added so far; `None` at step 0.
    pub novel_miou: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(
        step_index: usize,
        confusion: ConfusionMatrix,
        known: &[u8],
        base: &[u8],
        novel: &[u8],
    ) -> Result<Self> {
        let ious = confusion.iou_per_class();
        let per_class_iou = known
            .iter()
            .map(|&c| (c, ious.get(c as usize).copied().flatten()))
            .collect();
        Ok(Self {
            step_index,
            per_class_iou,
            overall_miou: confusion.subset_miou(known)?,
            base_miou: confusion.subset_miou(base)?,
            novel_miou: if novel.is_empty() {
                None
            } else {
                Some(confusion.subset_miou(novel)?)
            },
            confusion,
        })
    }

    /// One JSON object per metric: `step`, `scope`, `class_or_mean`, `value`.
    pub fn records(&self) -> Vec<serde_json::Value> {
        let rec = |scope: &str, key: String, value: Option<f64>| {
            serde_json::json!({
                "step": self.step_index,
                "scope": scope,
                "class_or_mean": key,
                "value": value,
            })
        };
        let mut out = vec![
            rec("overall", "mean".into(), Some(self.overall_miou)),
            rec("base", "mean".into(), Some(self.base_miou)),
        ];
        if let Some(n) = self.novel_miou {
            out.push(rec("novel", "mean".into(), Some(n)));
        }
        for (c, v) in &self.per_class_iou {
            out.push(rec("class", c.to_string(), *v));
        }
        out
    }
}

/// Per-step series for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<usize>,
    pub overall: Vec<f64>,
    pub base: Vec<f64>,
    pub novel: Vec<Option<f64>>,
}

impl Trajectory {
    /// Final base-class mIoU over the step-0 value.
    pub fn retention(&self) -> f64 {
        let first = self.base.first().copied().unwrap_or(f64::NAN);
        let last = self.base.last().copied().unwrap_or(f64::NAN);
        last / first
    }

    /// `(step, value)` points of the overall and base series.
    pub fn curves(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let pts = |v: &[f64]| self.steps.iter().zip(v).map(|(&s, &m)| (s as f64, m)).collect();
        (pts(&self.overall), pts(&self.base))
    }
}

pub fn trajectory_report(reports: &[MetricsReport]) -> Result<Trajectory> {
    if reports.is_empty() {
        return Err(Error::Evaluation("a trajectory needs at least one step".into()));
    }
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.step_index);
    Ok(Trajectory {
        steps: sorted.iter().map(|r| r.step_index).collect(),
        overall: sorted.iter().map(|r| r.overall_miou).collect(),
        base: sorted.iter().map(|r| r.base_miou).collect(),
        novel: sorted.iter().map(|r| r.novel_miou).collect(),
    })
}

/// Two-part table: overall mIoU per step, then base-class mIoU per step.
pub fn render_trajectory_table(series: &[(String, Trajectory)]) -> String {
    let steps: Vec<usize> = {
        let mut s: Vec<usize> = series.iter().flat_map(|(_, t)| t.steps.iter().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let name_w = series.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let header = |out: &mut String| {
        let _ = write!(out, "{:<name_w$}", "method");
        for s in &steps {
            let label = if *s == 0 { "base".to_string() } else { format!("step {s}") };
            let _ = write!(out, " | {label:>8}");
        }
        out.push('\n');
    };
    for (title, pick) in [
        ("Overall mIoU (all classes known at each step)", 0),
        ("Base-class mIoU (stability)", 1),
    ] {
        let _ = writeln!(out, "{title}");
        header(&mut out);
        for (name, t) in series {
            let _ = write!(out, "{name:<name_w$}");
            for s in &steps {
                let v = t.steps.iter().position(|x| x == s).map(|i| match pick {
                    0 => t.overall[i],
                    _ => t.base[i],
                });
                match v {
                    Some(v) => {
                        let _ = write!(out, " | {:>8.2}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, " | {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    for (name, t) in series {
        let _ = writeln!(out, "{name}: base retention {:.1}%", t.retention() * 100.0);
    }
    out
}
