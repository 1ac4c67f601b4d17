mod oracles;

use incseg::metrics::ConfusionMatrix;
use incseg::routing::{roc_scores, sweep_scores};
use ndarray::Array2;
use oracles::*;
use proptest::prelude::*;

/// `(k, pred, gt)` on an 8x8 grid; about one in eight truth pixels ignored.
fn instance() -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
    (2usize..=8).prop_flat_map(|k| {
        let pred = prop::collection::vec(0..k as u8, 64);
        let gt = prop::collection::vec(
            prop_oneof![7 => 0..k as u8, 1 => Just(IGNORE)],
            64,
        );
        (Just(k), pred, gt)
    })
}

fn matrix(k: usize, pred: &[u8], gt: &[u8]) -> ConfusionMatrix {
    let p = Array2::from_shape_vec((8, 8), pred.to_vec()).unwrap();
    let g = Array2::from_shape_vec((8, 8), gt.to_vec()).unwrap();
    let mut m = ConfusionMatrix::new(k);
    m.accumulate(p.view(), g.view()).unwrap();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn confusion_matches_oracle((k, pred, gt) in instance()) {
        let m = matrix(k, &pred, &gt);
        let o = oracle_confusion(&pred, &gt, k);
        for g in 0..k {
            for p in 0..k {
                prop_assert_eq!(m.get(g, p), o[g][p]);
            }
        }
    }

    #[test]
    fn iou_and_subset_miou_match_oracle((k, pred, gt) in instance(), mask in any::<u8>()) {
        let m = matrix(k, &pred, &gt);
        prop_assert_eq!(m.iou_per_class(), oracle_iou(&pred, &gt, k));
        let subset: Vec<u8> = (0..k as u8).filter(|c| mask & (1 << c) != 0).collect();
        if !subset.is_empty() {
            let ours = m.subset_miou(&subset).ok();
            prop_assert_eq!(ours, oracle_subset_miou(&pred, &gt, k, &subset));
        }
    }

    #[test]
    fn merge_equals_union((k, pred, gt) in instance(), (_, pred2, gt2) in instance()) {
        let pred2: Vec<u8> = pred2.iter().map(|&p| p % k as u8).collect();
        let gt2: Vec<u8> = gt2.iter().map(|&g| if g == IGNORE { g } else { g % k as u8 }).collect();
        let mut a = matrix(k, &pred, &gt);
        a.merge(&matrix(k, &pred2, &gt2)).unwrap();
        let all_p: Vec<u8> = pred.iter().chain(&pred2).copied().collect();
        let all_g: Vec<u8> = gt.iter().chain(&gt2).copied().collect();
        let o = oracle_confusion(&all_p, &all_g, k);
        for g in 0..k {
            for p in 0..k {
                prop_assert_eq!(a.get(g, p), o[g][p]);
            }
        }
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        raw in prop::collection::vec((0u8..=20, any::<bool>()), 1000)
    ) {
        // coarse scores so ties are common
        let scores: Vec<f32> = raw.iter().map(|(s, _)| *s as f32 / 20.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let truth: Vec<u8> = labels.iter().map(|&l| u8::from(l)).collect();
        let roc = roc_scores(&scores, &truth).unwrap();
        let wide: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let o = oracle_auc(&wide, &labels);
        prop_assert!((roc.auc - o.values[0]).abs() < 1e-9, "{} vs {}", roc.auc, o.values[0]);
    }

    #[test]
    fn sweep_matches_brute_force_counts(
        scores in prop::collection::vec(0.0f32..1.0, 16),
        truth in prop::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(IGNORE)], 16),
    ) {
        prop_assume!(truth.iter().any(|&t| t != IGNORE));
        let grid = [0.25, 0.5, 0.75];
        let sweep = sweep_scores(&scores, &truth, &grid).unwrap();
        for (row, &tau) in sweep.rows.iter().zip(&grid) {
            let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s as f64 > tau)).collect();
            let iou = oracle_iou(&pred, &truth, 2)[1].unwrap_or(0.0);
            prop_assert_eq!(row.iou, iou);
            let tp = (0..16).filter(|&i| truth[i] == 1 && pred[i] == 1).count() as f64;
            let pos = truth.iter().filter(|&&t| t == 1).count() as f64;
            let claimed = (0..16).filter(|&i| truth[i] != IGNORE && pred[i] == 1).count() as f64;
            prop_assert_eq!(row.recall, if pos > 0.0 { tp / pos } else { 0.0 });
            prop_assert_eq!(row.precision, if claimed > 0.0 { tp / claimed } else { 0.0 });
        }
        for w in sweep.rows.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall);
        }
    }
}

#[test]
fn oracle_sanity() {
    let id: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
    let o = oracle_confusion(&id, &id, 4);
    for (g, row) in o.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            assert_eq!(v > 0, g == p);
        }
    }
    let ignore = vec![IGNORE; 64];
    assert!(oracle_confusion(&id, &ignore, 4).iter().flatten().all(|&v| v == 0));
    assert_eq!(oracle_auc(&[0.9, 0.1], &[true, false]).values[0], 1.0);
    assert_eq!(oracle_auc(&[0.5, 0.5, 0.5], &[true, false, true]).values[0], 0.5);
}

#[test]
fn two_class_toy() {
    let m = matrix_2x2(&[0, 1, 1, 1], &[0, 0, 1, 1]);
    assert_eq!(m.iou_per_class(), vec![Some(0.5), Some(2.0 / 3.0)]);
    assert_eq!(oracle_iou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2), vec![Some(0.5), Some(2.0 / 3.0)]);
}

fn matrix_2x2(pred: &[u8], gt: &[u8]) -> ConfusionMatrix {
    let p = Array2::from_shape_vec((2, 2), pred.to_vec()).unwrap();
    let g = Array2::from_shape_vec((2, 2), gt.to_vec()).unwrap();
    let mut m = ConfusionMatrix::new(2);
    m.accumulate(p.view(), g.view()).unwrap();
    m
}
