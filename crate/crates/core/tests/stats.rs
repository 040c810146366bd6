mod common;

use common::{instance, rng};
use kinising::stats::{coupling_roc, means_and_correlations, mse, pearson, roc_auc, trajectory_stats};
use nalgebra::DMatrix;
use rand::Rng;

#[test]
fn roc_reference_cases() {
    let sep = roc_auc(&[true, true, false, false, false], &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
    assert_eq!(sep.auc, 1.0);
    let hand = roc_auc(&[true, true, false, false], &[0.9, 0.4, 0.6, 0.1]).unwrap();
    assert!((hand.auc - 0.75).abs() < 1e-15);
    let fpr: Vec<f64> = hand.points.iter().map(|p| p.fpr).collect();
    let tpr: Vec<f64> = hand.points.iter().map(|p| p.tpr).collect();
    assert_eq!(fpr, [0.0, 0.0, 0.5, 0.5, 1.0]);
    assert_eq!(tpr, [0.0, 0.5, 0.5, 1.0, 1.0]);
}

/// Mann-Whitney statistic: probability that a positive outscores a
/// negative, ties counting one half.
fn mann_whitney(truth: &[bool], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (a, sa) in truth.iter().zip(scores) {
        for (b, sb) in truth.iter().zip(scores) {
            if *a && !*b {
                pairs += 1.0;
                wins += if sa > sb { 1.0 } else if sa == sb { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_equals_mann_whitney_with_ties() {
    let mut r = rng(1);
    for _ in 0..20 {
        let n = 30;
        let truth: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.4).collect();
        if truth.iter().all(|t| *t) || truth.iter().all(|t| !*t) {
            continue;
        }
        // coarse scores force ties
        let scores: Vec<f64> = truth.iter().map(|&t| (r.random::<f64>() * 5.0 + f64::from(u8::from(t))).floor()).collect();
        let auc = roc_auc(&truth, &scores).unwrap().auc;
        assert!((auc - mann_whitney(&truth, &scores)).abs() < 1e-12);
    }
}

#[test]
fn chance_scores_give_half() {
    let mut r = rng(2);
    let truth: Vec<bool> = (0..10_000).map(|_| r.random::<bool>()).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| r.random::<f64>()).collect();
    let auc = roc_auc(&truth, &scores).unwrap().auc;
    assert!((0.47..=0.53).contains(&auc), "{auc}");
}

#[test]
fn auc_is_invariant_under_monotone_maps() {
    let mut r = rng(3);
    let truth: Vec<bool> = (0..200).map(|_| r.random::<bool>()).collect();
    let scores: Vec<f64> = truth.iter().map(|&t| r.random::<f64>() + 0.3 * f64::from(u8::from(t))).collect();
    let base = roc_auc(&truth, &scores).unwrap().auc;
    for f in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x.powi(3), |x: f64| (x + 1.0).ln()] {
        let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
        assert_eq!(roc_auc(&truth, &mapped).unwrap().auc, base);
    }
}

#[test]
fn coupling_roc_can_skip_the_diagonal() {
    let truth = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
    let scores = DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.9, 0.0]);
    assert_eq!(coupling_roc(&truth, &scores, true).unwrap().auc, 1.0);
    assert!(coupling_roc(&truth, &scores, false).unwrap().auc < 1.0);
}

#[test]
fn correlations_match_a_time_grid_sum() {
    let (_, traj) = instance(4, 0.5, 0.6, 30.0, 13);
    let r = trajectory_stats(&traj, 3, 100, 0).unwrap();
    let dt = 1e-4;
    let steps = (traj.t_end() / dt).round() as usize;
    let n = 4;
    let samples: Vec<Vec<f64>> = (0..steps)
        .map(|k| traj.state_at((k as f64 + 0.5) * dt).iter().map(|&s| f64::from(s)).collect())
        .collect();
    let m: Vec<f64> = (0..n).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / steps as f64).collect();
    for i in 0..n {
        assert!((r.m[i] - m[i]).abs() < 1e-3);
        assert!((r.c2[(i, i)] - (1.0 - r.m[i] * r.m[i])).abs() < 1e-12);
        for j in 0..n {
            let c = samples.iter().map(|s| s[i] * s[j]).sum::<f64>() / steps as f64 - m[i] * m[j];
            assert!((r.c2[(i, j)] - c).abs() < 1e-3, "C_{i}{j}: {} vs {c}", r.c2[(i, j)]);
        }
    }
    assert_eq!(r.c3.len(), 4);
    for t in &r.c3 {
        let [a, b, c] = [t.indices[0], t.indices[1], t.indices[2]];
        let v = samples.iter().map(|s| (s[a] - m[a]) * (s[b] - m[b]) * (s[c] - m[c])).sum::<f64>() / steps as f64;
        assert!((t.value - v).abs() < 1e-3, "{:?}: {} vs {v}", t.indices, t.value);
    }
}

#[test]
fn fourth_order_tuples_are_subsampled_reproducibly() {
    let (_, traj) = instance(12, 0.5, 0.4, 30.0, 2);
    let a = trajectory_stats(&traj, 4, 50, 7).unwrap();
    let b = trajectory_stats(&traj, 4, 50, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.c4.len(), 50);
    assert_eq!(a.c3.len(), 50);
    let (m, c2) = means_and_correlations(&traj);
    assert_eq!(a.m, m);
    assert_eq!(a.c2, c2);
}

#[test]
fn pearson_reference_values() {
    let x = [0.3, 1.7, 2.2, 4.9, 5.1];
    let y = [1.1, 0.4, 2.9, 3.3, 6.8];
    // 50-digit decimal evaluation
    let reference = 0.817_637_102_258_174_5;
    assert!((pearson(&x, &y).unwrap() - reference).abs() < 1e-14);
    let lin: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    assert!((pearson(&x, &lin).unwrap() - 1.0).abs() < 1e-14);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-14);
}

#[test]
fn mse_matches_naive_loop() {
    let mut r = rng(6);
    let a = DMatrix::from_fn(7, 7, |_, _| r.random::<f64>());
    let b = DMatrix::from_fn(7, 7, |_, _| r.random::<f64>());
    let mut naive = 0.0;
    for i in 0..7 {
        for j in 0..7 {
            naive += (a[(i, j)] - b[(i, j)]).powi(2);
        }
    }
    assert!((mse(&a, &b).unwrap() - naive / 49.0).abs() < 1e-15);
    let shifted = a.map(|v| v + 0.25);
    assert!((mse(&a, &shifted).unwrap() - 0.0625).abs() < 1e-15);
}
