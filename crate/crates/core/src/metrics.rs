//! Evaluation metrics. Everything here works on plain `f64` slices.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::MaseDenominator;
use crate::error::{Error, Result};

/// Named metric values, serialized as a flat JSON object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.values.values().all(|v| v.is_finite())
    }

    /// Two aligned columns, one metric per line.
    pub fn to_table(&self) -> String {
        let width = self.values.keys().map(String::len).max().unwrap_or(0);
        self.values
            .iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>12.6}\n"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(path, text.as_bytes())
    }
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::arg(format!("{op}: empty input")));
    }
    Ok(())
}

fn masked_mean(
    op: &'static str,
    pred: &[f64],
    target: &[f64],
    mask: Option<&[bool]>,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    check_pair(op, pred, target)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    match mask {
        Some(m) => {
            if m.len() != pred.len() {
                return Err(Error::shape(op, &[pred.len()], &[m.len()]));
            }
            for ((&p, &t), &keep) in pred.iter().zip(target).zip(m) {
                if keep {
                    sum += f(p - t);
                    n += 1;
                }
            }
        }
        None => {
            for (&p, &t) in pred.iter().zip(target) {
                sum += f(p - t);
            }
            n = pred.len();
        }
    }
    if n == 0 {
        return Err(Error::arg(format!("{op}: mask selects no positions")));
    }
    Ok(sum / n as f64)
}

/// Mean squared error, optionally over the positions where `mask` is true.
pub fn mse(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    masked_mean("mse", pred, target, mask, |d| d * d)
}

pub fn mae(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    masked_mean("mae", pred, target, mask, f64::abs)
}

/// `200/H · Σ |y - ŷ| / (|y| + |ŷ|)`, with 0/0 terms counted as 0.
pub fn smape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair("smape", y, y_hat)?;
    let total: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&a, &b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                (a - b).abs() / den
            }
        })
        .sum();
    Ok(200.0 * total / y.len() as f64)
}

/// Mean absolute error scaled by a seasonal-naive error of period `m`.
///
/// With [`MaseDenominator::InHorizon`] the scale is the mean of `|y_j - y_{j-m}|`
/// over the horizon itself (needs `H > m`); with
/// [`MaseDenominator::TrainingSeries`] it is taken over `history`
/// (needs `history.len() > m`).
pub fn mase(
    y: &[f64],
    y_hat: &[f64],
    m: usize,
    denominator: MaseDenominator,
    history: Option<&[f64]>,
) -> Result<f64> {
    check_pair("mase", y, y_hat)?;
    if m == 0 {
        return Err(Error::arg("mase: seasonality must be >= 1"));
    }
    let base = match denominator {
        MaseDenominator::InHorizon => y,
        MaseDenominator::TrainingSeries => {
            history.ok_or_else(|| Error::arg("mase: training-series scale needs the history"))?
        }
    };
    if base.len() <= m {
        return Err(Error::arg(format!(
            "mase: need more than m = {m} points for the scale, got {}",
            base.len()
        )));
    }
    let scale = base.windows(m + 1).map(|w| (w[m] - w[0]).abs()).sum::<f64>() / (base.len() - m) as f64;
    if scale == 0.0 {
        return Err(Error::arg("mase: seasonal differences are all zero"));
    }
    let err = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    Ok(err / scale)
}

/// `½ (SMAPE / SMAPE_naive2 + MASE / MASE_naive2)`
pub fn owa(smape: f64, mase: f64, smape_naive2: f64, mase_naive2: f64) -> Result<f64> {
    if !(smape_naive2 > 0.0 && mase_naive2 > 0.0) {
        return Err(Error::arg("owa: reference scores must be > 0"));
    }
    Ok(0.5 * (smape / smape_naive2 + mase / mase_naive2))
}

/// Repeats the last `m` observed values over `horizon` steps.
pub fn seasonal_naive(history: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    if m == 0 || history.len() < m {
        return Err(Error::arg(format!(
            "seasonal naive needs at least m = {m} >= 1 history points, got {}",
            history.len()
        )));
    }
    let tail = &history[history.len() - m..];
    Ok((0..horizon).map(|h| tail[h % m]).collect())
}

/// Weighted mean of per-subset scores (e.g. M4 frequency groups).
pub fn weighted_average(values: &[f64], weights: &[f64]) -> Result<f64> {
    check_pair("weighted_average", values, weights)?;
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::arg("weights must be non-negative with a positive sum"));
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}

/// Point-wise precision, recall and F1 with `score > threshold` flagged.
pub fn anomaly_f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape("anomaly_f1", &[scores.len()], &[labels.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mut r = MetricReport::new();
    r.insert("precision", precision);
    r.insert("recall", recall);
    r.insert("f1", f1);
    Ok(r)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` (row-major, `classes` wide) whose argmax equals the label.
pub fn accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if classes == 0 || logits.len() != classes * labels.len() {
        return Err(Error::shape(
            "accuracy",
            &[logits.len()],
            &[labels.len(), classes],
        ));
    }
    if labels.is_empty() {
        return Err(Error::arg("accuracy: no samples"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let hits = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_mae_examples() {
        assert_eq!(mse(&[0.0, 2.0], &[0.0, 0.0], None).unwrap(), 2.0);
        assert_eq!(mae(&[0.0, 2.0], &[0.0, 0.0], None).unwrap(), 1.0);
        assert_eq!(mse(&[1.5, -2.0], &[1.5, -2.0], None).unwrap(), 0.0);
        assert!(mse(&[1.0], &[1.0], Some(&[false])).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn masked_equals_explicit_subset() {
        let p = [1.0, 4.0, -2.0, 0.5, 3.0];
        let t = [0.0, 1.0, -1.0, 0.5, 7.0];
        let m = [true, false, true, false, true];
        let (ps, ts): (Vec<f64>, Vec<f64>) = p
            .iter()
            .zip(&t)
            .zip(&m)
            .filter(|(_, &k)| k)
            .map(|((&a, &b), _)| (a, b))
            .unzip();
        assert_eq!(mse(&p, &t, Some(&m)).unwrap(), mse(&ps, &ts, None).unwrap());
        assert_eq!(mae(&p, &t, Some(&m)).unwrap(), mae(&ps, &ts, None).unwrap());
    }

    #[test]
    fn forecasting_metric_examples() {
        assert!((smape(&[100.0], &[50.0]).unwrap() - 200.0 * 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(smape(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        let m = mase(&[1.0, 3.0], &[1.0, 1.0], 1, MaseDenominator::InHorizon, None).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        assert!(mase(&[1.0, 3.0], &[1.0, 1.0], 2, MaseDenominator::InHorizon, None).is_err());
        assert!(mase(&[2.0, 2.0, 2.0], &[1.0; 3], 1, MaseDenominator::InHorizon, None).is_err());
        let hist = [0.0, 1.0, 0.0, 1.0];
        let m = mase(&[1.0], &[0.0], 1, MaseDenominator::TrainingSeries, Some(&hist)).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(owa(0.0, 0.0, 10.0, 1.0).unwrap(), 0.0);
        assert_eq!(owa(10.0, 2.0, 10.0, 1.0).unwrap(), 1.5);
        assert!(owa(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn seasonal_naive_repeats_the_last_season() {
        assert_eq!(
            seasonal_naive(&[9.0, 1.0, 2.0], 2, 5).unwrap(),
            [1.0, 2.0, 1.0, 2.0, 1.0]
        );
        assert!(seasonal_naive(&[1.0], 2, 3).is_err());
    }

    #[test]
    fn anomaly_examples() {
        let r = anomaly_f1(&[0.1, 0.9, 0.2, 0.8], &[false, true, false, false], 0.5).unwrap();
        assert_eq!(r.get("precision"), Some(0.5));
        assert_eq!(r.get("recall"), Some(1.0));
        assert!((r.get("f1").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let r = anomaly_f1(&[0.1, 0.9], &[false, true], 1.0).unwrap();
        assert_eq!(r.get("recall"), Some(0.0));
        assert_eq!(r.get("f1"), Some(0.0));
        let r = anomaly_f1(&[0.1, 0.9], &[false, true], 0.5).unwrap();
        assert_eq!(r.get("f1"), Some(1.0));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 1]).unwrap(), 1.0);
        assert_eq!(argmax(&[0.3, 0.3, 0.3]), 0);
        let logits = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(accuracy(&logits, 2, &[0, 1, 0, 1]).unwrap(), 0.75);
        assert!(accuracy(&logits, 2, &[0, 1, 0, 2]).is_err());
    }

    #[test]
    fn report_json_and_table() {
        let mut r = MetricReport::new();
        r.insert("mse", 0.5);
        r.insert("mae", 0.25);
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"mae":0.25,"mse":0.5}"#);
        assert_eq!(r.to_table().lines().count(), 2);
    }

    proptest! {
        #[test]
        fn smape_is_bounded_and_symmetric(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..20)
        ) {
            let (y, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a = smape(&y, &f).unwrap();
            let b = smape(&f, &y).unwrap();
            prop_assert!((0.0..=200.0 + 1e-9).contains(&a));
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
