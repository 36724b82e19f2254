//! Ranking and significance metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Number of predictions per video kept by [`gap`] by default.
pub const GAP_TOP_N: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub video: String,
    pub label: u32,
    pub confidence: f64,
}

impl ScoredPrediction {
    pub fn new(video: impl Into<String>, label: u32, confidence: f64) -> Self {
        Self { video: video.into(), label, confidence }
    }
}

/// Video id → ground-truth label set.
pub type GroundTruth = BTreeMap<String, BTreeSet<u32>>;

/// Descending confidence, ties broken by `(video, label)` ascending.
fn rank_order(a: &ScoredPrediction, b: &ScoredPrediction) -> Ordering {
    b.confidence.total_cmp(&a.confidence).then_with(|| a.video.cmp(&b.video)).then_with(|| a.label.cmp(&b.label))
}

fn check_finite(preds: &[ScoredPrediction]) -> Result<()> {
    match preds.iter().find(|p| !p.confidence.is_finite()) {
        Some(p) => Err(Error::NonFiniteInput(format!("confidence for video {:?} label {}", p.video, p.label))),
        None => Ok(()),
    }
}

/// Global average precision over the pooled top-`n_per_video` predictions of each
/// video. The denominator is the total number of ground-truth labels.
pub fn gap(preds: &[ScoredPrediction], truth: &GroundTruth, n_per_video: usize) -> Result<f64> {
    let positives: usize = truth.values().map(BTreeSet::len).sum();
    if positives == 0 {
        return Err(Error::data("GAP needs at least one ground-truth label"));
    }
    check_finite(preds)?;
    let mut by_video: BTreeMap<&str, Vec<&ScoredPrediction>> = BTreeMap::new();
    for p in preds {
        by_video.entry(p.video.as_str()).or_default().push(p);
    }
    let mut pooled: Vec<&ScoredPrediction> = Vec::new();
    for (_, mut v) in by_video {
        v.sort_by(|a, b| rank_order(a, b));
        pooled.extend(v.into_iter().take(n_per_video));
    }
    pooled.sort_by(|a, b| rank_order(a, b));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, p) in pooled.iter().enumerate() {
        if truth.get(&p.video).is_some_and(|s| s.contains(&p.label)) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Fraction of videos in `truth` whose highest-confidence prediction is correct.
/// Videos without predictions count as misses.
pub fn hit_at_1(preds: &[ScoredPrediction], truth: &GroundTruth) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::data("Hit@1 needs at least one video"));
    }
    check_finite(preds)?;
    let mut top: BTreeMap<&str, &ScoredPrediction> = BTreeMap::new();
    for p in preds {
        match top.get(p.video.as_str()) {
            Some(best) if rank_order(best, p) != Ordering::Greater => {}
            _ => {
                top.insert(p.video.as_str(), p);
            }
        }
    }
    let hits =
        truth.iter().filter(|(v, labels)| top.get(v.as_str()).is_some_and(|p| labels.contains(&p.label))).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Expands a dense `videos × classes` score table into scored predictions.
pub fn predictions_from_scores(ids: &[String], scores: &[Vec<f64>]) -> Vec<ScoredPrediction> {
    ids.iter()
        .zip(scores)
        .flat_map(|(id, row)| row.iter().enumerate().map(move |(c, &s)| ScoredPrediction::new(id.clone(), c as u32, s)))
        .collect()
}

/// ROC AUC via the Mann–Whitney statistic with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput("AUC score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("AUC needs both positive and negative examples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McNemar {
    /// A right, B wrong.
    pub b: usize,
    /// A wrong, B right.
    pub c: usize,
    pub chi2: f64,
    pub p_value: f64,
}

/// Continuity-corrected McNemar test on paired correctness vectors.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::DimensionMismatch { expected: correct_a.len(), got: correct_b.len() });
    }
    let b = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count();
    let c = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count();
    Ok(mcnemar_counts(b, c))
}

pub fn mcnemar_counts(b: usize, c: usize) -> McNemar {
    if b + c == 0 {
        return McNemar { b, c, chi2: 0.0, p_value: 1.0 };
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let chi2 = diff * diff / (b + c) as f64;
    McNemar { b, c, chi2, p_value: chi2_1_survival(chi2) }
}

/// Survival function of the χ² distribution with one degree of freedom.
pub fn chi2_1_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    libm::erfc((x / 2.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(pairs: &[(&str, &[u32])]) -> GroundTruth {
        pairs.iter().map(|(v, l)| (v.to_string(), l.iter().copied().collect())).collect()
    }

    #[test]
    fn gap_hand_case() {
        let t = truth(&[("a", &[1, 3])]);
        let p = vec![
            ScoredPrediction::new("a", 1, 0.9),
            ScoredPrediction::new("a", 2, 0.8),
            ScoredPrediction::new("a", 3, 0.7),
        ];
        let g = gap(&p, &t, GAP_TOP_N).unwrap();
        assert!((g - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn gap_extremes() {
        let t = truth(&[("a", &[0]), ("b", &[1, 2])]);
        let all = vec![
            ScoredPrediction::new("b", 2, 0.1),
            ScoredPrediction::new("a", 0, 0.3),
            ScoredPrediction::new("b", 1, 0.9),
        ];
        assert_eq!(gap(&all, &t, GAP_TOP_N).unwrap(), 1.0);
        let none = vec![ScoredPrediction::new("a", 5, 0.9), ScoredPrediction::new("b", 0, 0.2)];
        assert_eq!(gap(&none, &t, GAP_TOP_N).unwrap(), 0.0);
        assert!(gap(&all, &GroundTruth::new(), GAP_TOP_N).is_err());
    }

    #[test]
    fn gap_keeps_top_n_per_video() {
        let t = truth(&[("a", &[0])]);
        let p = vec![ScoredPrediction::new("a", 1, 0.9), ScoredPrediction::new("a", 0, 0.5)];
        assert_eq!(gap(&p, &t, 1).unwrap(), 0.0);
        assert_eq!(gap(&p, &t, 2).unwrap(), 0.5);
    }

    #[test]
    fn hit_at_1_cases() {
        let t = truth(&[("a", &[0]), ("b", &[1]), ("c", &[2])]);
        let p = vec![
            ScoredPrediction::new("a", 0, 0.9),
            ScoredPrediction::new("a", 1, 0.1),
            ScoredPrediction::new("b", 0, 0.8),
            ScoredPrediction::new("b", 1, 0.2),
            ScoredPrediction::new("c", 1, 0.6),
            ScoredPrediction::new("c", 2, 0.4),
        ];
        assert!((hit_at_1(&p, &t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3, 0.2, 0.8, 0.1], &[true, false, true, false]).unwrap(), 1.0);
        assert!(auc(&[0.3], &[true]).is_err());
    }

    #[test]
    fn mcnemar_cases() {
        let m = mcnemar_counts(10, 2);
        assert!((m.chi2 - 49.0 / 12.0).abs() < 1e-15);
        assert!((m.p_value - 0.0433).abs() < 5e-4);
        assert!((mcnemar_counts(5, 5).chi2 - 0.1).abs() < 1e-15);
        let same = mcnemar(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((same.chi2, same.p_value), (0.0, 1.0));
    }

    #[test]
    fn chi2_survival_reference_points() {
        // 3.841458820694124 is the 0.95 quantile of chi-square with one degree of freedom
        assert!((chi2_1_survival(3.841458820694124) - 0.05).abs() < 1e-12);
        assert_eq!(chi2_1_survival(0.0), 1.0);
    }
}
