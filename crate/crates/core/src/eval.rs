//! Average precision, precision-recall curves and evaluation reports.
//!
//! Examples with equal scores share one threshold: they enter the ranking
//! together, so the metric does not depend on the order of tied examples.

use std::path::Path;

use aftermath_nn::Scalar;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{contract, Error, Result};
use crate::toyworld::LabeledPair;

/// Name recorded in reports for the metric definition.
pub const METRIC: &str = "average_precision (step-wise, tied scores form one threshold)";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<usize> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(contract("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive label".into()));
    }
    Ok(positives)
}

/// One point per distinct score, from the highest threshold down.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<PrPoint>> {
    let positives = check(scores, labels)? as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            points.push(PrPoint { precision: tp / (tp + fp), recall: tp / positives, threshold: scores[i] });
        }
    }
    Ok(points)
}

/// `sum_n (R_n - R_{n-1}) P_n` over the curve's thresholds.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(ap_from_curve(&pr_curve(scores, labels)?))
}

pub fn ap_from_curve(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in points {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    ap.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auprc: f64,
    pub pr_points: Vec<PrPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub domain: String,
    pub checkpoint_hash: String,
    pub metric: String,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], domain: &str, checkpoint_hash: &str) -> Result<Self> {
        let pr_points = pr_curve(scores, labels)?;
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            auprc: ap_from_curve(&pr_points),
            pr_points,
            n_pos,
            n_neg: labels.len() - n_pos,
            domain: domain.to_owned(),
            checkpoint_hash: checkpoint_hash.to_owned(),
            metric: METRIC.into(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Scores `pairs` in order with the model's damage probability.
pub fn evaluate<T: Scalar>(model: &ClassifierModel<T>, pairs: &[LabeledPair], domain: &str) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(contract("cannot evaluate on an empty dataset"));
    }
    let scores = model.probabilities(pairs)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    EvalReport::from_scores(&scores, &labels, domain, &model.hash())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert!((auprc(&[0.9, 0.2], &[0, 1]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(auprc(&[0.3, 0.1, 0.7], &[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(auprc(&[0.3, 0.1], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let labels = [1, 0, 0, 1, 0];
        assert!((auprc(&[0.5; 5], &labels).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn curve_has_one_point_per_threshold() {
        let c = pr_curve(&[0.9, 0.2, 0.9], &[1, 0, 0]).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.windows(2).all(|w| w[0].recall <= w[1].recall && w[0].threshold > w[1].threshold));
    }
}
