//! Ranking metrics and the binary cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::BCE_CLAMP;
use crate::sequence::TaskKind;

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(
            "bce_loss",
            format!("{} probabilities, {} labels", probs.len(), labels.len()),
        ));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y != 0).count();
    (pos, labels.len() - pos)
}

fn check_pairs(metric: &'static str, scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(metric, format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain {
            op: metric,
            detail: format!("score {s} is not finite"),
        });
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric {
            metric,
            reason: format!("{pos} positives and {neg} negatives"),
        });
    }
    Ok((pos, neg))
}

/// Indices sorted by score, descending, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted
/// as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_pairs("auroc", scores, labels)?;
    // Walk groups from the lowest score up, counting negatives below.
    let mut negatives_below = 0usize;
    let mut twice_wins: u128 = 0;
    for group in tie_groups(scores).iter().rev() {
        let (gp, gn) = group.iter().fold((0usize, 0usize), |(p, n), &i| {
            if labels[i] != 0 {
                (p + 1, n)
            } else {
                (p, n + 1)
            }
        });
        twice_wins += (2 * gp * negatives_below + gp * gn) as u128;
        negatives_below += gn;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision: for each distinct threshold, the recall gained times
/// the precision at that threshold.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_pairs("auprc", scores, labels)?;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut area = 0.0;
    for group in tie_groups(scores) {
        let gp = group.iter().filter(|&&i| labels[i] != 0).count();
        tp += gp;
        seen += group.len();
        if gp > 0 {
            area += gp as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(area / pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auprc: f64,
    pub auroc: f64,
    /// Mean per-label AuROC; multilabel tasks only.
    pub macro_auc: Option<f64>,
    /// AuROC over flattened label-score pairs; multilabel tasks only.
    pub micro_auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl MetricReport {
    /// CSV cells for `auprc,auroc,macro_auc,micro_auc`; absent values are empty.
    pub fn csv_cells(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{},{}",
            self.auprc,
            self.auroc,
            opt(self.macro_auc),
            opt(self.micro_auc)
        )
    }
}

/// Binary metrics over one score per label.
pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<MetricReport> {
    let (positives, negatives) = check_pairs("auroc", scores, labels)?;
    Ok(MetricReport {
        auprc: auprc(scores, labels)?,
        auroc: auroc(scores, labels)?,
        macro_auc: None,
        micro_auc: None,
        positives,
        negatives,
    })
}

/// Multilabel metrics over `samples × labels` row-major scores. Labels that
/// have a single class in the set are left out of the macro average.
pub fn compute_multilabel_metrics(scores: &[f64], labels: &[u8], n_labels: usize) -> Result<MetricReport> {
    if n_labels == 0 || scores.len() != labels.len() || scores.len() % n_labels != 0 {
        return Err(Error::shape(
            "multilabel metrics",
            format!("{} scores, {} labels, width {n_labels}", scores.len(), labels.len()),
        ));
    }
    let micro = compute_metrics(scores, labels)?;
    let mut per_label = Vec::new();
    for j in 0..n_labels {
        let s: Vec<f64> = scores.iter().skip(j).step_by(n_labels).copied().collect();
        let y: Vec<u8> = labels.iter().skip(j).step_by(n_labels).copied().collect();
        match auroc(&s, &y) {
            Ok(a) => per_label.push(a),
            Err(Error::UndefinedMetric { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if per_label.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "macro_auc",
            reason: "no label has both classes".into(),
        });
    }
    Ok(MetricReport {
        macro_auc: Some(per_label.iter().sum::<f64>() / per_label.len() as f64),
        micro_auc: Some(micro.auroc),
        ..micro
    })
}

/// Metrics appropriate for `task` over concatenated predictions and targets.
pub fn task_metrics(task: TaskKind, scores: &[f64], targets: &[f64]) -> Result<MetricReport> {
    let labels: Vec<u8> = targets.iter().map(|&y| u8::from(y >= 0.5)).collect();
    match task {
        TaskKind::Phenotyping => compute_multilabel_metrics(scores, &labels, task.out_dim()),
        _ => compute_metrics(scores, &labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_loss() {
        let l = bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        let want = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((l - want).abs() < 1e-15);
        assert!((bce_loss(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
    }

    #[test]
    fn ties_and_perfect_ranking() {
        let labels = [0, 1, 0, 1, 1, 0];
        assert_eq!(auroc(&[0.3; 6], &labels).unwrap(), 0.5);
        let perfect = [0.1, 0.9, 0.2, 0.8, 0.7, 0.3];
        assert_eq!(auroc(&perfect, &labels).unwrap(), 1.0);
        assert_eq!(auprc(&perfect, &labels).unwrap(), 1.0);
        // All tied: precision is the prevalence.
        assert_eq!(auprc(&[0.3; 6], &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        match compute_metrics(&[0.1, 0.2], &[1, 1]) {
            Err(Error::UndefinedMetric { metric, .. }) => assert_eq!(metric, "auroc"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(auprc(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric { metric: "auprc", .. })));
    }

    #[test]
    fn macro_skips_single_class_labels() {
        // Two samples, two labels; the second label is all zero.
        let scores = [0.9, 0.4, 0.1, 0.3];
        let labels = [1, 0, 0, 0];
        let r = compute_multilabel_metrics(&scores, &labels, 2).unwrap();
        assert_eq!(r.macro_auc, Some(1.0));
        assert_eq!(r.positives, 1);
    }
}
