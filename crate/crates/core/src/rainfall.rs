//! Ground-truth labels, daily aggregation, evaluation and data splits.

mod daily;
mod labels;
mod metrics;

use std::fmt::Write as _;

pub use daily::{
    daily_aggregate, daily_from_labels, daily_ungated, read_daily, read_predictions, write_daily, write_predictions,
    DailyRainfall, DailyTotals, PredictionWriter,
};
pub use labels::{
    default_label_window, load_adjustments, minute_labels, parse_gauge, rain_events, read_gauge, read_labels,
    write_gauge, write_labels, BoundaryAdjustment, GaugeConfig, GaugeRecord, RainEvent, RainLabel,
    DEFAULT_EVENT_GAP_MIN, TIP_MM,
};
pub use metrics::{detection_metrics, estimation_metrics, Confusion, DayError, DetectionMetrics, EstimationMetrics};

use crate::error::{Error, Result};

/// Chronological train/validation/test split without shuffling.
pub fn sequential_split<T>(items: &[T], fractions: (f64, f64, f64)) -> Result<(&[T], &[T], &[T])> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = items.len();
    let n_train = ((n as f64 * a).round() as usize).min(n);
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let (train, rest) = items.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    if val.is_empty() {
        log::warn!("validation split is empty");
    }
    if test.is_empty() {
        log::warn!("test split is empty");
    }
    Ok((train, val, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub detection: DetectionMetrics,
    pub estimation: Option<EstimationMetrics>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let d = &self.detection;
        let _ = writeln!(
            s,
            "detection: accuracy {:.4}  F1 {:.4}  (tp {} fp {} fn {} tn {})",
            d.accuracy, d.f1, d.confusion.tp, d.confusion.fp, d.confusion.fn_, d.confusion.tn
        );
        match &self.estimation {
            Some(e) => {
                let mape = e.mape.map_or("n/a".to_string(), |m| format!("{:.1}%", 100.0 * m));
                let _ = writeln!(
                    s,
                    "estimation: TRE {:.4}  MADE {:.3} mm/day  MAPE {mape}",
                    e.tre, e.made
                );
                for day in &e.days {
                    let _ = writeln!(
                        s,
                        "  {}  predicted {:8.3} mm  true {:8.3} mm",
                        day.date, day.predicted_mm, day.true_mm
                    );
                }
            }
            None => {
                let _ = writeln!(s, "estimation: n/a (no rain in the reference)");
            }
        }
        s
    }

    /// `metric,value` rows followed by the per-day table.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let ctx = "report csv";
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let mut row = |fields: &[String]| w.write_record(fields).map_err(|e| Error::csv(ctx, e));
        row(&["metric".into(), "value".into()])?;
        row(&["accuracy".into(), self.detection.accuracy.to_string()])?;
        row(&["f1".into(), self.detection.f1.to_string()])?;
        if let Some(e) = &self.estimation {
            row(&["tre".into(), e.tre.to_string()])?;
            row(&["made".into(), e.made.to_string()])?;
            row(&["mape".into(), e.mape.map_or(String::new(), |m| m.to_string())])?;
            row(&["date".into(), "predicted_mm".into(), "true_mm".into()])?;
            for d in &e.days {
                row(&[d.date.to_string(), d.predicted_mm.to_string(), d.true_mm.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(ctx, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_minutes_split_sixty_twenty_twenty() {
        let items: Vec<u32> = (0..100).collect();
        let (a, b, c) = sequential_split(&items, (0.6, 0.2, 0.2)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        assert!(a.last() < b.first() && b.last() < c.first());
    }

    #[test]
    fn all_train_split() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b, c) = sequential_split(&items, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(a.len(), 10);
        assert!(b.is_empty() && c.is_empty());
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(sequential_split(&[1, 2], (0.5, 0.6, 0.0)).is_err());
        assert!(sequential_split(&[1, 2], (1.2, -0.2, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let b = b * (1.0 - a);
            let c = 1.0 - a - b;
            let items: Vec<usize> = (0..n).collect();
            let (x, y, z) = sequential_split(&items, (a, b, c)).unwrap();
            let joined: Vec<usize> = x.iter().chain(y).chain(z).copied().collect();
            prop_assert_eq!(joined, items);
        }
    }
}
