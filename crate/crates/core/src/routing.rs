//! Confidence routing: a novel-class head claims a pixel when its
//! probability exceeds `tau`; every other pixel keeps the base prediction.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::model::{argmax_labels, IncrementalUnit, SegmentationModel};

pub const DEFAULT_TAU: f64 = 0.75;

/// How overlapping claims from several heads are resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arbitration {
    /// Highest confidence wins; equal confidences go to the later step.
    #[default]
    MaxConfidence,
    /// The most recent step with a confidence above `tau` wins.
    LatestStepFirst,
}

impl fmt::Display for Arbitration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arbitration::MaxConfidence => "max_confidence",
            Arbitration::LatestStepFirst => "latest_step_first",
        })
    }
}

impl FromStr for Arbitration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_confidence" => Ok(Arbitration::MaxConfidence),
            "latest_step_first" => Ok(Arbitration::LatestStepFirst),
            other => Err(Error::Config(format!("unknown arbitration `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub tau: f64,
    #[serde(default)]
    pub arbitration: Arbitration,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            arbitration: Arbitration::default(),
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelSource {
    Base,
    Step(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutedPrediction {
    pub label_map: Array2<u8>,
    pub source_map: Array2<PixelSource>,
    /// Winning head probability, or the base softmax maximum.
    pub confidence_map: Array2<f32>,
}

/// One incremental head's output for an image.
#[derive(Clone, Copy, Debug)]
pub struct HeadMap<'a> {
    pub step_index: usize,
    pub class_ids: &'a [u8],
    /// `(|class_ids|, H, W)` probabilities.
    pub probs: ArrayView3<'a, f32>,
}

pub fn route(
    base_logits: ArrayView3<f32>,
    base_class_ids: &[u8],
    heads: &[HeadMap<'_>],
    config: &RoutingConfig,
) -> Result<RoutedPrediction> {
    config.validate()?;
    let (c, h, w) = base_logits.dim();
    if c != base_class_ids.len() {
        return Err(Error::Dimension(format!(
            "{c} base logit channels for {} class ids",
            base_class_ids.len()
        )));
    }
    for head in heads {
        let (hc, hh, hw) = head.probs.dim();
        if (hh, hw) != (h, w) {
            return Err(Error::Dimension(format!(
                "head of step {} is {hh}x{hw}, base logits are {h}x{w}",
                head.step_index
            )));
        }
        if hc != head.class_ids.len() || hc == 0 {
            return Err(Error::Dimension(format!(
                "head of step {} has {hc} channels for {} classes",
                head.step_index,
                head.class_ids.len()
            )));
        }
    }
    let logits = base_logits.to_owned();
    let mut label_map = argmax_labels(&logits, base_class_ids);
    let mut source_map = Array2::from_elem((h, w), PixelSource::Base);
    let mut confidence_map = Array2::<f32>::zeros((h, w));
    let tau = config.tau;
    for y in 0..h {
        for x in 0..w {
            // (confidence, step, class id) of the current winner
            let mut best: Option<(f32, usize, u8)> = None;
            for head in heads {
                let mut conf = head.probs[[0, y, x]];
                let mut id = head.class_ids[0];
                for k in 1..head.class_ids.len() {
                    if head.probs[[k, y, x]] > conf {
                        conf = head.probs[[k, y, x]];
                        id = head.class_ids[k];
                    }
                }
                if (conf as f64) <= tau {
                    continue;
                }
                let better = match (best, config.arbitration) {
                    (None, _) => true,
                    (Some((bc, bs, _)), Arbitration::MaxConfidence) => {
                        conf > bc || (conf == bc && head.step_index > bs)
                    }
                    (Some((_, bs, _)), Arbitration::LatestStepFirst) => head.step_index > bs,
                };
                if better {
                    best = Some((conf, head.step_index, id));
                }
            }
            match best {
                Some((conf, step, id)) => {
                    label_map[[y, x]] = id;
                    source_map[[y, x]] = PixelSource::Step(step);
                    confidence_map[[y, x]] = conf;
                }
                None => {
                    let m = (0..c).map(|k| logits[[k, y, x]]).fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = (0..c).map(|k| (logits[[k, y, x]] - m).exp()).sum();
                    confidence_map[[y, x]] = 1.0 / z;
                }
            }
        }
    }
    Ok(RoutedPrediction {
        label_map,
        source_map,
        confidence_map,
    })
}

/// Routed prediction of a frozen model plus its units for one image.
pub fn predict_routed(
    model: &SegmentationModel,
    units: &[IncrementalUnit],
    image: &Array3<f32>,
    config: &RoutingConfig,
) -> Result<RoutedPrediction> {
    let (logits, probs) = model.forward_with_units(image, units)?;
    let heads: Vec<HeadMap<'_>> = units
        .iter()
        .zip(&probs)
        .map(|(u, p)| HeadMap {
            step_index: u.step_index,
            class_ids: &u.novel_class_ids,
            probs: p.view(),
        })
        .collect();
    route(logits.view(), &model.class_ids, &heads, config)
}

// ----------------------------------------------------------------------------
// threshold analysis

/// `1` where the label is one of `class_ids`, ignore where ignored, else `0`.
pub fn binary_truth(labels: ArrayView2<u8>, class_ids: &[u8]) -> Array2<u8> {
    labels.mapv(|l| {
        if l == IGNORE_INDEX {
            IGNORE_INDEX
        } else {
            u8::from(class_ids.contains(&l))
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub rows: Vec<SweepRow>,
    /// Grid value with the highest IoU; the lowest such value on ties.
    pub best_tau: f64,
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty tau grid".into()));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("tau grid values must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("tau grid must be strictly increasing".into()));
    }
    Ok(())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Binary metrics of `score > tau` at each grid value over pooled pixels.
/// Truth is `1`/`0` with ignored pixels skipped; an undefined ratio is
/// reported as `0`.
pub fn sweep_scores(scores: &[f32], truth: &[u8], grid: &[f64]) -> Result<ThresholdSweep> {
    check_grid(grid)?;
    if scores.len() != truth.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    let valid: Vec<(f32, bool)> = scores
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t != IGNORE_INDEX)
        .map(|(&s, &t)| (s, t == 1))
        .collect();
    if valid.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let rows: Vec<SweepRow> = grid
        .iter()
        .map(|&tau| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for &(s, pos) in &valid {
                match ((s as f64) > tau, pos) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            SweepRow {
                tau,
                iou: ratio(tp, tp + fp + fn_),
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let mut best = rows[0];
    for r in &rows[1..] {
        if r.iou > best.iou {
            best = *r;
        }
    }
    Ok(ThresholdSweep {
        best_tau: best.tau,
        rows,
    })
}

pub fn sweep_threshold(probs: ArrayView2<f32>, truth: ArrayView2<u8>, grid: &[f64]) -> Result<ThresholdSweep> {
    if probs.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} vs ground truth {:?}",
            probs.dim(),
            truth.dim()
        )));
    }
    let s: Vec<f32> = probs.iter().copied().collect();
    let t: Vec<u8> = truth.iter().copied().collect();
    sweep_scores(&s, &t, grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(FPR, TPR)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over every distinct score with trapezoidal AUC.
pub fn roc_scores(scores: &[f32], truth: &[u8]) -> Result<Roc> {
    if scores.len() != truth.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    let mut valid: Vec<(f32, bool)> = scores
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t != IGNORE_INDEX)
        .map(|(&s, &t)| (s, t == 1))
        .collect();
    let pos = valid.iter().filter(|v| v.1).count() as f64;
    let neg = valid.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::UndefinedRoc);
    }
    valid.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < valid.len() {
        let score = valid[i].0;
        while i < valid.len() && valid[i].0 == score {
            if valid[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (px, py) = *points.last().expect("non-empty");
        let (x, y) = (fp / neg, tp / pos);
        auc += (x - px) * (y + py) / 2.0;
        points.push((x, y));
    }
    Ok(Roc { points, auc })
}

pub fn roc_and_auc(probs: ArrayView2<f32>, truth: ArrayView2<u8>) -> Result<Roc> {
    if probs.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} vs ground truth {:?}",
            probs.dim(),
            truth.dim()
        )));
    }
    let s: Vec<f32> = probs.iter().copied().collect();
    let t: Vec<u8> = truth.iter().copied().collect();
    roc_scores(&s, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn logits_for(argmax: &Array2<u8>, c: usize) -> Array3<f32> {
        let (h, w) = argmax.dim();
        Array3::from_shape_fn((c, h, w), |(k, y, x)| if argmax[[y, x]] as usize == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn worked_example() {
        let base = array![[0u8, 1], [2, 0]];
        let logits = logits_for(&base, 3);
        let probs = array![[[0.9f32, 0.5], [0.76, 0.1]]];
        let heads = [HeadMap {
            step_index: 1,
            class_ids: &[15],
            probs: probs.view(),
        }];
        let out = route(logits.view(), &[0, 1, 2], &heads, &RoutingConfig::default()).unwrap();
        assert_eq!(out.label_map, array![[15u8, 1], [15, 0]]);
        assert_eq!(out.source_map[[0, 0]], PixelSource::Step(1));
        assert_eq!(out.source_map[[0, 1]], PixelSource::Base);
    }

    #[test]
    fn tau_one_and_zero() {
        let base = array![[0u8, 1], [1, 0]];
        let logits = logits_for(&base, 2);
        let probs = Array3::from_elem((1, 2, 2), 1.0f32);
        let heads = [HeadMap {
            step_index: 1,
            class_ids: &[9],
            probs: probs.view(),
        }];
        let cfg = RoutingConfig {
            tau: 1.0,
            ..Default::default()
        };
        assert_eq!(route(logits.view(), &[0, 1], &heads, &cfg).unwrap().label_map, base);
        let cfg = RoutingConfig {
            tau: 0.0,
            ..Default::default()
        };
        let probs = Array3::from_elem((1, 2, 2), 0.01f32);
        let heads = [HeadMap {
            step_index: 1,
            class_ids: &[9],
            probs: probs.view(),
        }];
        assert!(route(logits.view(), &[0, 1], &heads, &cfg)
            .unwrap()
            .label_map
            .iter()
            .all(|&l| l == 9));
        assert!(route(logits.view(), &[0, 1], &[], &cfg).is_ok());
    }

    #[test]
    fn arbitration_rules() {
        let logits = Array3::<f32>::zeros((2, 1, 1));
        let a = array![[[0.9f32]]];
        let b = array![[[0.8f32]]];
        let heads = [
            HeadMap {
                step_index: 1,
                class_ids: &[5],
                probs: a.view(),
            },
            HeadMap {
                step_index: 2,
                class_ids: &[6],
                probs: b.view(),
            },
        ];
        let max = RoutingConfig::default();
        assert_eq!(route(logits.view(), &[0, 1], &heads, &max).unwrap().label_map[[0, 0]], 5);
        let latest = RoutingConfig {
            arbitration: Arbitration::LatestStepFirst,
            ..max
        };
        assert_eq!(route(logits.view(), &[0, 1], &heads, &latest).unwrap().label_map[[0, 0]], 6);
        // equal confidence goes to the later step
        let heads = [heads[0], HeadMap { probs: a.view(), ..heads[1] }];
        assert_eq!(route(logits.view(), &[0, 1], &heads, &max).unwrap().label_map[[0, 0]], 6);
        // base argmax ties go to the lowest id
        assert_eq!(route(logits.view(), &[3, 4], &[], &max).unwrap().label_map[[0, 0]], 3);
    }

    #[test]
    fn shape_mismatch_and_bad_tau() {
        let logits = Array3::<f32>::zeros((2, 2, 2));
        let probs = Array3::<f32>::zeros((1, 3, 2));
        let heads = [HeadMap {
            step_index: 1,
            class_ids: &[5],
            probs: probs.view(),
        }];
        assert!(matches!(
            route(logits.view(), &[0, 1], &heads, &RoutingConfig::default()),
            Err(Error::Dimension(_))
        ));
        let bad = RoutingConfig {
            tau: 1.5,
            ..Default::default()
        };
        assert!(route(logits.view(), &[0, 1], &[], &bad).is_err());
        assert_eq!("latest_step_first".parse::<Arbitration>().unwrap(), Arbitration::LatestStepFirst);
        assert!("newest".parse::<Arbitration>().is_err());
    }

    #[test]
    fn sweep_perfect_head() {
        let truth = array![[1u8, 0], [0, 1]];
        let probs = truth.mapv(|t| t as f32);
        let sweep = sweep_threshold(probs.view(), truth.view(), &default_tau_grid()).unwrap();
        assert_eq!(sweep.rows.len(), 19);
        assert!(sweep.rows.iter().all(|r| r.iou == 1.0));
        assert_eq!(sweep.best_tau, 0.05);
    }

    #[test]
    fn sweep_guards() {
        let truth = Array2::from_elem((2, 2), IGNORE_INDEX);
        let probs = Array2::<f32>::zeros((2, 2));
        assert!(matches!(
            sweep_threshold(probs.view(), truth.view(), &[0.5]),
            Err(Error::EmptySupervision)
        ));
        let truth = Array2::<u8>::zeros((2, 2));
        assert!(sweep_threshold(probs.view(), truth.view(), &[0.5, 0.5]).is_err());
        assert!(sweep_threshold(probs.view(), truth.view(), &[1.5]).is_err());
    }

    #[test]
    fn roc_extremes() {
        let truth = array![[1u8, 1], [0, 0]];
        let sep = array![[0.9f32, 0.8], [0.2, 0.1]];
        assert_eq!(roc_and_auc(sep.view(), truth.view()).unwrap().auc, 1.0);
        let flat = Array2::from_elem((2, 2), 0.5f32);
        let roc = roc_and_auc(flat.view(), truth.view()).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        let single = Array2::<u8>::ones((2, 2));
        assert!(matches!(roc_and_auc(flat.view(), single.view()), Err(Error::UndefinedRoc)));
    }

    #[test]
    fn binary_truth_keeps_ignore() {
        let labels = array![[6u8, 2], [IGNORE_INDEX, 254]];
        assert_eq!(binary_truth(labels.view(), &[6]), array![[1u8, 0], [IGNORE_INDEX, 0]]);
    }
}
