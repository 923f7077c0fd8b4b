//! Metrics against brute-force oracles that work sample by sample.

use bigat_core::data::argmax_rows;
use bigat_core::metrics::{class_report, confusion, fpr_macro, fpr_micro, roc_auc_ovr};
use bigat_core::numerics::softmax_rows;
use bigat_core::{RngStream, Tensor};
use proptest::prelude::*;

fn random_case(rng: &mut RngStream) -> (usize, Vec<usize>, Tensor) {
    let c = 2 + rng.below(5);
    let n = 1 + rng.below(200);
    let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    // Coarse logits so that ties occur.
    let logits: Vec<f64> = (0..n * c).map(|_| (rng.normal() * 2.0).round() / 2.0).collect();
    (c, y, softmax_rows(&Tensor::new(vec![n, c], logits).unwrap()))
}

fn pair_count(y: &[usize], p: &[usize], i: usize, j: usize) -> u64 {
    y.iter().zip(p).filter(|(&a, &b)| a == i && b == j).count() as u64
}

fn pairwise_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for a in 0..scores.len() {
        for b in 0..scores.len() {
            if pos[a] && !pos[b] {
                pairs += 1.0;
                if scores[a] > scores[b] {
                    wins += 1.0;
                } else if scores[a] == scores[b] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

#[test]
fn hundred_random_instances_match_oracles() {
    let mut rng = RngStream::new(2024);
    for case in 0..100 {
        let (c, y, probs) = random_case(&mut rng);
        let pred = argmax_rows(&probs);
        let cm = confusion(&y, &pred, c).unwrap();
        for i in 0..c {
            for j in 0..c {
                assert_eq!(cm.get(i, j), pair_count(&y, &pred, i, j), "case {case}");
            }
        }
        let r = class_report(&cm).unwrap();
        let n = y.len() as f64;
        let mut fprs = Vec::new();
        let (mut fp_all, mut neg_all) = (0.0, 0.0);
        for k in 0..c {
            let tp = (0..y.len()).filter(|&s| y[s] == k && pred[s] == k).count() as f64;
            let fp = (0..y.len()).filter(|&s| y[s] != k && pred[s] == k).count() as f64;
            let fn_ = (0..y.len()).filter(|&s| y[s] == k && pred[s] != k).count() as f64;
            let tn = n - tp - fp - fn_;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            let m = &r.per_class[k];
            assert!((m.precision - prec).abs() < 1e-12);
            assert!((m.recall - rec).abs() < 1e-12);
            assert!((m.f1 - f1).abs() < 1e-12);
            fprs.push(if fp + tn > 0.0 { fp / (fp + tn) } else { 0.0 });
            fp_all += fp;
            neg_all += fp + tn;
        }
        let macro_oracle = fprs.iter().sum::<f64>() / c as f64;
        assert!((fpr_macro(&cm) - macro_oracle).abs() < 1e-12);
        assert!((fpr_micro(&cm) - fp_all / neg_all).abs() < 1e-12);
        let acc = y.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / n;
        assert!((r.accuracy - acc).abs() < 1e-12);

        let curves = roc_auc_ovr(&y, &probs).unwrap();
        for k in 0..c {
            let scores: Vec<f64> = (0..y.len()).map(|s| probs.data()[s * c + k]).collect();
            let pos: Vec<bool> = y.iter().map(|&l| l == k).collect();
            match (curves[k].auc, pairwise_auc(&scores, &pos)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "case {case} class {k}: {a} vs {b}"),
                (None, None) => {}
                other => panic!("case {case}: definedness differs {other:?}"),
            }
        }
    }
}

proptest! {
    #[test]
    fn accuracy_equals_micro_recall_and_trace(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let (c, y, probs) = random_case(&mut rng);
        let pred = argmax_rows(&probs);
        let cm = confusion(&y, &pred, c).unwrap();
        let r = class_report(&cm).unwrap();
        let micro_recall = r.per_class.iter().map(|m| m.recall * m.support as f64).sum::<f64>() / y.len() as f64;
        prop_assert!((r.accuracy - micro_recall).abs() < 1e-12);
        prop_assert!((r.accuracy - cm.trace() as f64 / cm.total() as f64).abs() < 1e-12);
        prop_assert!((r.weighted_avg.recall - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn normalized_rows_sum_to_one(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let (c, y, probs) = random_case(&mut rng);
        let cm = confusion(&y, &argmax_rows(&probs), c).unwrap();
        for (i, row) in cm.normalized_rows().iter().enumerate() {
            let s: f64 = row.iter().sum();
            if y.contains(&i) {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn macro_f1_is_bracketed(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let (c, y, probs) = random_case(&mut rng);
        let r = class_report(&confusion(&y, &argmax_rows(&probs), c).unwrap()).unwrap();
        let lo = r.per_class.iter().map(|m| m.f1).fold(f64::INFINITY, f64::min);
        let hi = r.per_class.iter().map(|m| m.f1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r.macro_avg.f1 >= lo - 1e-15 && r.macro_avg.f1 <= hi + 1e-15);
        for m in &r.per_class {
            prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.f1));
        }
    }

    #[test]
    fn roc_points_are_monotone(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let (_, y, probs) = random_case(&mut rng);
        for curve in roc_auc_ovr(&y, &probs).unwrap() {
            if let Some(auc) = curve.auc {
                prop_assert!((0.0..=1.0).contains(&auc));
                prop_assert_eq!(curve.points[0], (0.0, 0.0));
                prop_assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
                for w in curve.points.windows(2) {
                    prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
                }
            }
        }
    }
}
