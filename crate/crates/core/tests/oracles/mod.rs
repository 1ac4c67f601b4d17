//! Brute-force reference implementations for cross-checking the library.
//! Nothing here calls into production metric, routing or loss code; inputs
//! are plain slices.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub inputs_digest: u64,
    pub values: Vec<f64>,
}

pub fn digest<T: Hash>(inputs: &T) -> u64 {
    let mut h = DefaultHasher::new();
    inputs.hash(&mut h);
    h.finish()
}

/// `counts[g][p]`: for every (truth, prediction) pair, count matching pixels.
pub fn oracle_confusion(pred: &[u8], gt: &[u8], k: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; k]; k];
    for (g, row) in counts.iter_mut().enumerate() {
        for (p, cell) in row.iter_mut().enumerate() {
            for i in 0..gt.len() {
                if gt[i] as usize == g && pred[i] as usize == p {
                    *cell += 1;
                }
            }
        }
    }
    counts
}

/// IoU per class by direct pixel counting; `None` when the class is absent
/// from both maps.
pub fn oracle_iou(pred: &[u8], gt: &[u8], k: usize) -> Vec<Option<f64>> {
    (0..k as u8)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for i in 0..gt.len() {
                if gt[i] == IGNORE {
                    continue;
                }
                if gt[i] == c && pred[i] == c {
                    tp += 1;
                } else if pred[i] == c {
                    fp += 1;
                } else if gt[i] == c {
                    fn_ += 1;
                }
            }
            if tp + fp + fn_ == 0 {
                None
            } else {
                Some(tp as f64 / (tp + fp + fn_) as f64)
            }
        })
        .collect()
}

pub fn oracle_subset_miou(pred: &[u8], gt: &[u8], k: usize, subset: &[u8]) -> Option<f64> {
    let iou = oracle_iou(pred, gt, k);
    let mut sum = 0.0;
    let mut n = 0;
    for &c in subset {
        if let Some(v) = iou[c as usize] {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Mean over positive/negative pairs of `[s+ > s-] + 0.5 [s+ = s-]`.
pub fn oracle_auc(scores: &[f64], labels: &[bool]) -> OracleResult {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    let bits: Vec<u64> = scores.iter().map(|s| s.to_bits()).collect();
    OracleResult {
        name: "auc",
        inputs_digest: digest(&(bits, labels.to_vec())),
        values: vec![wins / pairs as f64],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleArbitration {
    MaxConfidence,
    LatestStep,
}

/// One head: step index, class ids, and `probs[c][pixel]`.
pub struct OracleHead {
    pub step: usize,
    pub ids: Vec<u8>,
    pub probs: Vec<Vec<f32>>,
}

/// Literal per-pixel application of the routing rule.
pub fn oracle_route(
    base_argmax: &[u8],
    heads: &[OracleHead],
    tau: f64,
    arbitration: OracleArbitration,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(base_argmax.len());
    for px in 0..base_argmax.len() {
        // every head's best class and confidence at this pixel
        let mut claims: Vec<(f32, usize, u8)> = Vec::new();
        for h in heads {
            let mut best_c = 0;
            for c in 0..h.ids.len() {
                if h.probs[c][px] > h.probs[best_c][px] {
                    best_c = c;
                }
            }
            let conf = h.probs[best_c][px];
            if conf as f64 > tau {
                claims.push((conf, h.step, h.ids[best_c]));
            }
        }
        let winner = match arbitration {
            OracleArbitration::LatestStep => claims.iter().max_by_key(|c| c.1),
            OracleArbitration::MaxConfidence => claims.iter().max_by(|a, b| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            }),
        };
        out.push(match winner {
            Some(c) => c.2,
            None => base_argmax[px],
        });
    }
    out
}

/// First index of the largest value.
pub fn oracle_argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean clamped binary cross-entropy, evaluated term by term.
pub fn oracle_bce(probs: &[f64], positive: &[Option<bool>], eps: f64) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (p, y) in probs.iter().zip(positive) {
        let Some(y) = y else { continue };
        let p = p.max(eps).min(1.0 - eps);
        total += if *y { -p.ln() } else { -(1.0 - p).ln() };
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

/// Softmax cross-entropy of one pixel.
pub fn oracle_ce(logits: &[f64], target: usize) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[target].exp() / z).ln()
}
