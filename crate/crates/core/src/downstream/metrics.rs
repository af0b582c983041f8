use crate::error::{Error, Result};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&y| y).count();
    (p, labels.len() - p)
}

/// Mann–Whitney AUROC: `(concordant + ½ tied) / (P · N)` over positive/negative pairs.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::DegenerateLabels("auroc needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups, doubled to stay integral
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u64;
        let pos = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += doubled * pos;
        i = j + 1;
    }
    let u2 = rank_sum2 - (p * (p + 1)) as u64;
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: mean over positives of precision at their rank, ranking
/// by descending score with ties kept in input order.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(Error::DegenerateLabels("aupr needs a positive"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

/// F1 and Cohen's kappa after predicting positive for `score >= threshold`.
pub fn f1_kappa(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = scores.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let nf = n as f64;
    let p_o = (tp + tn) as f64 / nf;
    let pred_pos = (tp + fp) as f64 / nf;
    let true_pos = (tp + fn_) as f64 / nf;
    let p_e = pred_pos * true_pos + (1.0 - pred_pos) * (1.0 - true_pos);
    let kappa = if p_e == 1.0 { 0.0 } else { (p_o - p_e) / (1.0 - p_e) };
    (f1, kappa)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &b(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &b(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.9], &b(&[0, 1, 0, 1])).unwrap(), 0.75);
        assert!(matches!(
            auroc(&[0.1, 0.2], &b(&[1, 1])),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(aupr(&[0.9, 0.8, 0.1], &b(&[1, 1, 0])).unwrap(), 1.0);
        let v = aupr(&[0.9, 0.8, 0.7], &b(&[1, 0, 1])).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-15);
        // all tied, positives last in input order: ranks 3 and 4 of 4
        let v = aupr(&[0.5; 4], &b(&[0, 0, 1, 1])).unwrap();
        assert!((v - (1.0 / 3.0 + 2.0 / 4.0) / 2.0).abs() < 1e-15);
        assert!(aupr(&[0.3], &b(&[0])).is_err());
    }

    #[test]
    fn f1_kappa_cases() {
        assert_eq!(f1_kappa(&[0.9, 0.1], &b(&[1, 0]), 0.5), (1.0, 1.0));
        let (f1, k) = f1_kappa(&[0.9, 0.9], &b(&[1, 0]), 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(k, 0.0);
        assert_eq!(f1_kappa(&[0.1, 0.2], &b(&[1, 0]), 0.5).0, 0.0);
        assert_eq!(f1_kappa(&[0.9, 0.9], &b(&[1, 1]), 0.5).1, 0.0);
    }

    #[test]
    fn auroc_monotone_invariance_and_complement() {
        let s = [0.3, -1.2, 0.8, 0.05, 2.0, 0.4];
        let y = b(&[0, 0, 1, 1, 1, 0]);
        let base = auroc(&s, &y).unwrap();
        let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        assert_eq!(base, auroc(&t, &y).unwrap());
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((base + auroc(&neg, &y).unwrap() - 1.0).abs() < 1e-15);
    }
}
