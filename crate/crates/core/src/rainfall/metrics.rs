//! Detection and estimation scores.

use std::collections::BTreeMap;

use chrono::NaiveDate;

use super::daily::DailyRainfall;
use super::labels::RainLabel;
use crate::error::{Error, Result};
use crate::model::MinutePrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// Per-minute scores over minutes present in both inputs.
pub fn detection_metrics(preds: &[MinutePrediction], labels: &[RainLabel], threshold: f64) -> Result<DetectionMetrics> {
    let truth: BTreeMap<_, bool> = labels.iter().map(|l| (l.minute, l.is_raining)).collect();
    let mut confusion = Confusion::default();
    let mut unmatched = 0;
    for p in preds {
        match truth.get(&p.minute) {
            Some(&actual) => confusion.record(p.p_rain >= threshold, actual),
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        log::warn!("{unmatched} predicted minutes have no label");
    }
    if confusion.total() == 0 {
        return Err(Error::InvalidMetricInput(
            "no minute has both a prediction and a label".into(),
        ));
    }
    Ok(DetectionMetrics {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayError {
    pub date: NaiveDate,
    pub predicted_mm: f64,
    pub true_mm: f64,
}

impl DayError {
    pub fn abs_error(&self) -> f64 {
        (self.predicted_mm - self.true_mm).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationMetrics {
    /// |sum(pred) - sum(true)| / sum(true) over all days.
    pub tre: f64,
    /// Mean absolute daily error in mm.
    pub made: f64,
    /// Mean of |pred - true| / true over days with rain, as a fraction;
    /// `None` when no day had rain.
    pub mape: Option<f64>,
    pub days: Vec<DayError>,
}

/// Daily scores; both inputs must cover the same dates.
pub fn estimation_metrics(daily_pred: &[DailyRainfall], daily_true: &[DailyRainfall]) -> Result<EstimationMetrics> {
    let pred: BTreeMap<NaiveDate, f64> = daily_pred.iter().map(|d| (d.date, d.total_mm)).collect();
    let truth: BTreeMap<NaiveDate, f64> = daily_true.iter().map(|d| (d.date, d.total_mm)).collect();
    if pred.len() != daily_pred.len() || truth.len() != daily_true.len() {
        return Err(Error::InvalidMetricInput("duplicate dates".into()));
    }
    if !pred.keys().eq(truth.keys()) {
        return Err(Error::InvalidMetricInput(
            "predicted and true daily series cover different dates".into(),
        ));
    }
    if truth.is_empty() {
        return Err(Error::InvalidMetricInput("no days to score".into()));
    }
    let days: Vec<DayError> = truth
        .iter()
        .map(|(&date, &true_mm)| DayError {
            date,
            predicted_mm: pred[&date],
            true_mm,
        })
        .collect();

    let sum_true: f64 = days.iter().map(|d| d.true_mm).sum();
    let sum_pred: f64 = days.iter().map(|d| d.predicted_mm).sum();
    if !(sum_true > 0.0) {
        return Err(Error::InvalidMetricInput(
            "total relative error needs rain on at least one day".into(),
        ));
    }
    let tre = (sum_pred - sum_true).abs() / sum_true;
    let made = days.iter().map(DayError::abs_error).sum::<f64>() / days.len() as f64;
    let rainy: Vec<f64> = days
        .iter()
        .filter(|d| d.true_mm > 0.0)
        .map(|d| d.abs_error() / d.true_mm)
        .collect();
    let mape = (!rainy.is_empty()).then(|| rainy.iter().sum::<f64>() / rainy.len() as f64);

    Ok(EstimationMetrics { tre, made, mape, days })
}
