use std::collections::BTreeMap;
use std::path::Path;

use chrono::{FixedOffset, NaiveDate};

use super::labels::RainLabel;
use crate::error::{Error, Result};
use crate::features::{format_time, parse_time};
use crate::ingest::Timestamp;
use crate::model::MinutePrediction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyRainfall {
    pub date: NaiveDate,
    pub total_mm: f64,
    pub raining_minutes: usize,
}

fn local_date(t: Timestamp, tz: FixedOffset) -> NaiveDate {
    t.with_timezone(&tz).date_naive()
}

/// Running daily totals; state grows with the number of dates only.
#[derive(Debug, Clone)]
pub struct DailyTotals {
    tz: FixedOffset,
    days: BTreeMap<NaiveDate, DailyRainfall>,
}

impl DailyTotals {
    pub fn new(tz: FixedOffset) -> Self {
        DailyTotals {
            tz,
            days: BTreeMap::new(),
        }
    }

    /// Registers minute `t`; `rain` is its depth if it counts as raining.
    pub fn add(&mut self, t: Timestamp, rain: Option<f64>) {
        let date = local_date(t, self.tz);
        let day = self.days.entry(date).or_insert(DailyRainfall {
            date,
            total_mm: 0.0,
            raining_minutes: 0,
        });
        if let Some(mm) = rain {
            day.total_mm += mm;
            day.raining_minutes += 1;
        }
    }

    pub fn add_prediction(&mut self, p: &MinutePrediction, threshold: f64) {
        self.add(p.minute, (p.p_rain >= threshold).then_some(p.intensity_mm_per_min));
    }

    pub fn finish(self) -> Vec<DailyRainfall> {
        self.days.into_values().collect()
    }
}

fn accumulate<I>(items: I, tz: FixedOffset) -> Vec<DailyRainfall>
where
    I: IntoIterator<Item = (Timestamp, Option<f64>)>,
{
    let mut totals = DailyTotals::new(tz);
    for (t, rain) in items {
        totals.add(t, rain);
    }
    totals.finish()
}

/// Daily sums of estimated intensity over minutes the detector marks as
/// raining (`p_rain >= threshold`). Every date with a prediction gets a
/// row, even if it is dry.
pub fn daily_aggregate(preds: &[MinutePrediction], threshold: f64, tz: FixedOffset) -> Vec<DailyRainfall> {
    accumulate(
        preds.iter().map(|p| {
            let gated = (p.p_rain >= threshold).then_some(p.intensity_mm_per_min);
            (p.minute, gated)
        }),
        tz,
    )
}

/// Daily sums of the estimator output over every minute, ignoring the
/// detector.
pub fn daily_ungated(preds: &[MinutePrediction], tz: FixedOffset) -> Vec<DailyRainfall> {
    accumulate(preds.iter().map(|p| (p.minute, Some(p.intensity_mm_per_min))), tz)
}

/// Ground-truth daily totals from minute labels.
pub fn daily_from_labels(labels: &[RainLabel], tz: FixedOffset) -> Vec<DailyRainfall> {
    accumulate(
        labels
            .iter()
            .map(|l| (l.minute, l.is_raining.then_some(l.intensity_mm_per_min))),
        tz,
    )
}

/// Writes prediction rows as they are produced.
pub struct PredictionWriter<W: std::io::Write> {
    w: csv::Writer<W>,
}

impl<W: std::io::Write> PredictionWriter<W> {
    const CTX: &'static str = "prediction csv";

    pub fn new(out: W) -> Result<Self> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["minute_utc", "p_rain", "intensity_mm_per_min"])
            .map_err(|e| Error::csv(Self::CTX, e))?;
        Ok(PredictionWriter { w })
    }

    pub fn write(&mut self, p: &MinutePrediction) -> Result<()> {
        self.w
            .write_record([
                format_time(p.minute),
                p.p_rain.to_string(),
                p.intensity_mm_per_min.to_string(),
            ])
            .map_err(|e| Error::csv(Self::CTX, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(Self::CTX, e))
    }
}

pub fn write_predictions<W: std::io::Write>(out: W, preds: &[MinutePrediction]) -> Result<()> {
    let mut w = PredictionWriter::new(out)?;
    for p in preds {
        w.write(p)?;
    }
    w.finish()
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<MinutePrediction>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(&ctx, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(&ctx, e))?;
        if rec.len() != 3 {
            return Err(Error::Malformed(format!("{ctx}: expected 3 columns")));
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|e| Error::Malformed(format!("{ctx}: {e}"))) };
        out.push(MinutePrediction {
            minute: parse_time(&rec[0])?,
            p_rain: num(1)?,
            intensity_mm_per_min: num(2)?,
        });
    }
    Ok(out)
}

pub fn write_daily<W: std::io::Write>(out: W, days: &[DailyRainfall]) -> Result<()> {
    let ctx = "daily csv";
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "total_mm", "raining_minutes"])
        .map_err(|e| Error::csv(ctx, e))?;
    for d in days {
        w.write_record([
            d.date.to_string(),
            d.total_mm.to_string(),
            d.raining_minutes.to_string(),
        ])
        .map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

pub fn read_daily(path: impl AsRef<Path>) -> Result<Vec<DailyRainfall>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(&ctx, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(&ctx, e))?;
        let bad = |e: String| Error::Malformed(format!("{ctx}: {e}"));
        if rec.len() != 3 {
            return Err(bad("expected 3 columns".into()));
        }
        out.push(DailyRainfall {
            date: rec[0].parse().map_err(|e: chrono::ParseError| bad(e.to_string()))?,
            total_mm: rec[1]
                .parse()
                .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            raining_minutes: rec[2]
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        });
    }
    Ok(out)
}
