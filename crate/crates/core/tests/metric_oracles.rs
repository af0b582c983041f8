//! Ranking and threshold metrics against brute-force enumeration.

use hmp_core::downstream::{aupr, auroc, f1_kappa, THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-12;

fn pairwise_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Rank of item `i` when sorting by descending score, ties in input order.
fn rank(s: &[f64], i: usize) -> usize {
    (0..s.len())
        .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j <= i))
        .count()
}

fn enumerated_ap(s: &[f64], y: &[bool]) -> f64 {
    let positives: Vec<usize> = (0..s.len()).filter(|&i| y[i]).collect();
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let k = rank(s, i);
            let hits = positives.iter().filter(|&&j| rank(s, j) <= k).count();
            hits as f64 / k as f64
        })
        .sum();
    total / positives.len() as f64
}

fn confusion_f1_kappa(s: &[f64], y: &[bool]) -> (f64, f64) {
    let n = s.len() as f64;
    let mut m = [[0.0f64; 2]; 2];
    for (v, &t) in s.iter().zip(y) {
        m[(*v >= THRESHOLD) as usize][t as usize] += 1.0;
    }
    let (tp, fp, fn_) = (m[1][1], m[1][0], m[0][1]);
    let f1 = if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let observed = (m[0][0] + m[1][1]) / n;
    let chance = (0..2)
        .map(|c| (m[c][0] + m[c][1]) / n * (m[0][c] + m[1][c]) / n)
        .sum::<f64>();
    let kappa = if chance == 1.0 { 0.0 } else { (observed - chance) / (1.0 - chance) };
    (f1, kappa)
}

#[test]
fn metrics_match_enumeration_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < INSTANCES {
        let n = rng.random_range(2..=20);
        // coarse score grid so ties are common
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
            continue;
        }
        checked += 1;
        let a = auroc(&s, &y).unwrap();
        assert!((a - pairwise_auroc(&s, &y)).abs() <= TOL, "auroc {s:?} {y:?}");
        let ap = aupr(&s, &y).unwrap();
        assert!((ap - enumerated_ap(&s, &y)).abs() <= TOL, "aupr {s:?} {y:?}");
        let (f1, k) = f1_kappa(&s, &y, THRESHOLD);
        let (f1o, ko) = confusion_f1_kappa(&s, &y);
        assert!((f1 - f1o).abs() <= TOL && (k - ko).abs() <= TOL, "f1/kappa {s:?} {y:?}");
    }
}
