//! Evaluation metrics for sentiment regression and emotion classification.

use std::fmt;

use serde::Serialize;

use crate::data::{Label, TaskMode, SCORE_RANGE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionMetrics {
    pub acc7: f64,
    /// Binary accuracy over nonzero labels; `None` when every label is zero.
    pub acc2: Option<f64>,
    pub f1: Option<f64>,
    pub mae: f64,
    /// Pearson correlation; `None` when either side has zero variance.
    pub corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// One-vs-rest accuracy per class.
    pub class_acc: Vec<f64>,
    pub class_f1: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum MetricsReport {
    Regression(RegressionMetrics),
    Classification(ClassificationMetrics),
}

/// Score rounded half away from zero and clamped to the annotation range.
pub fn seven_class(x: f64) -> i64 {
    x.round().clamp(SCORE_RANGE.0, SCORE_RANGE.1) as i64
}

fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
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
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn regression_metrics(preds: &[f64], labels: &[f64]) -> Result<RegressionMetrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "metrics need equal non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len() as f64;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| seven_class(**p) == seven_class(**l))
        .count();
    let mae = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / n;
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        if l == 0.0 {
            continue;
        }
        match (p > 0.0, l > 0.0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let nonzero = tp + tn + fp + fn_;
    let (acc2, f1) = if nonzero == 0 {
        (None, None)
    } else {
        (Some((tp + tn) as f64 / nonzero as f64), Some(f1_score(tp, fp, fn_)))
    };
    Ok(RegressionMetrics {
        acc7: hits as f64 / n,
        acc2,
        f1,
        mae,
        corr: pearson(preds, labels),
    })
}

pub fn classification_metrics(preds: &[usize], labels: &[usize], classes: usize) -> Result<ClassificationMetrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "metrics need equal non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("class {c} outside 0..{classes}")));
    }
    let n = preds.len();
    let mut class_acc = Vec::with_capacity(classes);
    let mut class_f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        class_acc.push((n - fp - fn_) as f64 / n as f64);
        class_f1.push(f1_score(tp, fp, fn_));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n as f64,
        mean_f1: class_f1.iter().sum::<f64>() / classes as f64,
        class_acc,
        class_f1,
    })
}

/// Row-wise argmax with the lowest index winning ties.
pub fn argmax_rows(outputs: &[f64], width: usize) -> Vec<usize> {
    outputs
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Metrics from raw head outputs (`[n]` scores or `[n, C]` logits).
pub fn compute_metrics(outputs: &[f64], labels: &[Label], mode: TaskMode) -> Result<MetricsReport> {
    match mode {
        TaskMode::Regression => {
            let ys: Vec<f64> = labels.iter().map(|l| l.as_f64()).collect();
            Ok(MetricsReport::Regression(regression_metrics(outputs, &ys)?))
        }
        TaskMode::Classification { classes } => {
            let preds = argmax_rows(outputs, classes);
            let ys: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    Label::Score(_) => Err(Error::InvalidArgument("score label in classification mode".into())),
                })
                .collect::<Result<_>>()?;
            Ok(MetricsReport::Classification(classification_metrics(&preds, &ys, classes)?))
        }
    }
}

impl MetricsReport {
    /// Model-selection score where lower is better: MAE, or `1 - mean F1`.
    pub fn selection_loss(&self) -> f64 {
        match self {
            MetricsReport::Regression(r) => r.mae,
            MetricsReport::Classification(c) => 1.0 - c.mean_f1,
        }
    }

    pub fn csv_header(mode: TaskMode) -> String {
        match mode {
            TaskMode::Regression => "acc7,acc2,f1,mae,corr".into(),
            TaskMode::Classification { classes } => {
                let mut cols = vec!["accuracy".to_string(), "mean_f1".to_string()];
                cols.extend((0..classes).map(|c| format!("acc_{c}")));
                cols.extend((0..classes).map(|c| format!("f1_{c}")));
                cols.join(",")
            }
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        match self {
            MetricsReport::Regression(r) => {
                format!("{},{},{},{},{}", r.acc7, opt(r.acc2), opt(r.f1), r.mae, opt(r.corr))
            }
            MetricsReport::Classification(c) => {
                let mut cols = vec![c.accuracy.to_string(), c.mean_f1.to_string()];
                cols.extend(c.class_acc.iter().map(|v| v.to_string()));
                cols.extend(c.class_f1.iter().map(|v| v.to_string()));
                cols.join(",")
            }
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        match self {
            MetricsReport::Regression(r) => {
                writeln!(f, "{:<6} {:>8}", "metric", "value")?;
                writeln!(f, "{:<6} {:>8.4}", "Acc7", r.acc7)?;
                writeln!(f, "{:<6} {:>8}", "Acc2", opt(r.acc2))?;
                writeln!(f, "{:<6} {:>8}", "F1", opt(r.f1))?;
                writeln!(f, "{:<6} {:>8.4}", "MAE", r.mae)?;
                write!(f, "{:<6} {:>8}", "Corr", opt(r.corr))
            }
            MetricsReport::Classification(c) => {
                writeln!(f, "{:<6} {:>8} {:>8}", "class", "acc", "f1")?;
                for (i, (a, s)) in c.class_acc.iter().zip(&c.class_f1).enumerate() {
                    writeln!(f, "{:<6} {:>8.4} {:>8.4}", i, a, s)?;
                }
                write!(f, "accuracy {:.4}  mean F1 {:.4}", c.accuracy, c.mean_f1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let y = [-2.4, -0.3, 0.0, 1.2, 2.9];
        let m = regression_metrics(&y, &y).unwrap();
        assert_eq!(m.acc7, 1.0);
        assert_eq!(m.acc2, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.mae, 0.0);
        assert!((m.corr.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clamping_and_ties() {
        assert_eq!(seven_class(3.6), 3);
        assert_eq!(seven_class(-4.2), -3);
        assert_eq!(seven_class(0.5), 1);
        assert_eq!(seven_class(-0.5), -1);
        let m = regression_metrics(&[3.6], &[3.0]).unwrap();
        assert_eq!(m.acc7, 1.0);
    }

    #[test]
    fn undefined_correlation_is_not_zero() {
        let m = regression_metrics(&[1.0, 1.0, 1.0], &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(m.corr, None);
        assert!(regression_metrics(&[], &[]).is_err());
    }

    #[test]
    fn zero_labels_are_excluded_from_binary_metrics() {
        let m = regression_metrics(&[0.4, -0.2, 1.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.acc2, None);
        let m = regression_metrics(&[0.4, -0.2, 1.0], &[0.0, -1.0, -2.0]).unwrap();
        assert_eq!(m.acc2, Some(0.5));
        assert_eq!(m.f1, Some(0.0));
    }

    #[test]
    fn per_class_scores() {
        let m = classification_metrics(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.class_f1[0], 1.0);
        assert!((m.class_f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.class_f1[2] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.class_acc[2], 0.75);
        assert!(classification_metrics(&[3], &[0], 3).is_err());
    }
}
