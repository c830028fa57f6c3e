//! Ranking and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean positive-class probability over a region's bags.
pub fn slide_score(bag_probs: &[f64]) -> Result<f64> {
    if bag_probs.is_empty() {
        return Err(Error::Data("slide score needs at least one bag".into()));
    }
    Ok(bag_probs.iter().sum::<f64>() / bag_probs.len() as f64)
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by score, ascending.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// ROC AUC by the Mann-Whitney rank-sum statistic; ties get midranks, which
/// is half credit per tied positive-negative pair.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let idx = order(scores);
    // twice the positive rank sum keeps midranks integral
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, midrank doubled = i + j + 2
        let mid2 = (i + j + 2) as u64;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank2_sum += mid2 * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (p as u64, n as u64);
    // U*2 = 2*R - P(P+1)
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Step-wise average precision: thresholds walk down the distinct scores,
/// tied scores enter together.
pub fn pr_ap(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::Data("average precision needs a positive".into()));
    }
    let mut idx = order(scores);
    idx.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of items where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc: f64,
    pub ap: f64,
    pub accuracy: f64,
    pub n: usize,
}

pub fn summarize(scores: &[f64], labels: &[u8]) -> Result<Summary> {
    Ok(Summary {
        auc: roc_auc(scores, labels)?,
        ap: pr_ap(scores, labels)?,
        accuracy: accuracy(scores, labels, 0.5)?,
        n: scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slide_scores() {
        assert_eq!(slide_score(&[0.2, 0.8]).unwrap(), 0.5);
        assert_eq!(slide_score(&[0.3]).unwrap(), 0.3);
        assert!((slide_score(&[0.7; 100]).unwrap() - 0.7).abs() < 1e-12);
        assert!(slide_score(&[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(pr_ap(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        let ap = pr_ap(&[0.8, 0.4, 0.35, 0.1], &[1, 0, 1, 0]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert!((pr_ap(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap() - 0.25).abs() < 1e-12);
        assert!(pr_ap(&[0.1], &[0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.1, 0.9], &[1, 0], 0.5).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.9, 0.9], &[1, 0], 0.5).unwrap(), 0.5);
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
    }
}
