use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::model::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    Matthews,
    Pearson,
}

impl MetricKind {
    pub fn compatible_with(self, task: TaskKind) -> bool {
        matches!(
            (self, task),
            (MetricKind::Accuracy | MetricKind::Matthews, TaskKind::Classification)
                | (MetricKind::Pearson, TaskKind::Regression)
        )
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            MetricKind::Accuracy => (0.0, 1.0),
            MetricKind::Matthews | MetricKind::Pearson => (-1.0, 1.0),
        }
    }
}

/// Accuracy, binary Matthews correlation, or sample Pearson correlation.
///
/// Class predictions and labels are passed as class indices in `f64`.
pub fn compute_metric(kind: MetricKind, predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(input_err(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(input_err("metric over an empty set"));
    }
    match kind {
        MetricKind::Accuracy => {
            let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(hits as f64 / labels.len() as f64)
        }
        MetricKind::Matthews => matthews(predictions, labels),
        MetricKind::Pearson => pearson(predictions, labels),
    }
}

fn matthews(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == 1.0, t == 1.0) {
            _ if !(p == 0.0 || p == 1.0) || !(t == 0.0 || t == 1.0) => {
                return Err(input_err("matthews correlation needs binary 0/1 classes"))
            }
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    Ok(matthews_from_counts(tp, tn, fp, fn_))
}

/// MCC from confusion counts; 0 when any marginal is empty.
pub fn matthews_from_counts(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(input_err("pearson correlation undefined for zero-variance input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_agreement() {
        let l = [0.0, 1.0, 1.0, 0.0, 1.0];
        for kind in [MetricKind::Accuracy, MetricKind::Matthews, MetricKind::Pearson] {
            assert!((compute_metric(kind, &l, &l).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_predictions_give_zero_mcc() {
        let p = [1.0; 4];
        let l = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(compute_metric(MetricKind::Matthews, &p, &l).unwrap(), 0.0);
    }

    #[test]
    fn mcc_hand_value() {
        // TP=4, TN=3, FP=1, FN=2: (12 - 2) / sqrt(5*6*4*5) = 10 / sqrt(600)
        let mut p = vec![];
        let mut l = vec![];
        for (pp, ll, n) in [(1.0, 1.0, 4), (0.0, 0.0, 3), (1.0, 0.0, 1), (0.0, 1.0, 2)] {
            for _ in 0..n {
                p.push(pp);
                l.push(ll);
            }
        }
        let m = compute_metric(MetricKind::Matthews, &p, &l).unwrap();
        assert!((m - 10.0 / 600f64.sqrt()).abs() < 1e-15);
        assert!((m - 0.4082).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        assert!(compute_metric(MetricKind::Accuracy, &[1.0], &[1.0, 0.0]).is_err());
        assert!(compute_metric(MetricKind::Accuracy, &[], &[]).is_err());
        assert!(compute_metric(MetricKind::Pearson, &[1.0, 1.0], &[0.0, 2.0]).is_err());
        assert!(compute_metric(MetricKind::Matthews, &[2.0], &[1.0]).is_err());
    }
}
