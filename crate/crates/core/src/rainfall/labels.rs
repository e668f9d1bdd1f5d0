//! Per-minute labels from a tipping-bucket gauge log.

use std::path::Path;

use chrono::{DurationRound, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{format_time, parse_time};
use crate::ingest::{seconds_between, Timestamp};

/// Rain depth registered by one bucket tip.
pub const TIP_MM: f64 = 0.22;
/// Tips further apart than this start a new rain event.
pub const DEFAULT_EVENT_GAP_MIN: i64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaugeRecord {
    pub t: Timestamp,
    pub cumulative_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaugeConfig {
    pub tip_mm: f64,
    pub event_gap_min: i64,
}

impl Default for GaugeConfig {
    fn default() -> Self {
        GaugeConfig {
            tip_mm: TIP_MM,
            event_gap_min: DEFAULT_EVENT_GAP_MIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RainLabel {
    pub minute: Timestamp,
    pub is_raining: bool,
    pub intensity_mm_per_min: f64,
}

/// Manually corrected boundaries of one gauge-detected event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryAdjustment {
    /// 1-based event number in chronological order.
    pub event: usize,
    pub start: Timestamp,
    pub end: Timestamp,
}

/// Tips grouped into one event.
#[derive(Debug, Clone, PartialEq)]
pub struct RainEvent {
    pub id: usize,
    pub first_tip: Timestamp,
    pub last_tip: Timestamp,
    /// Cumulative depth just before the first tip.
    pub level_before: f64,
}

fn validate_records(records: &[GaugeRecord], cfg: &GaugeConfig) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if !r.cumulative_mm.is_finite() || r.cumulative_mm < 0.0 {
            return Err(Error::InvalidGauge(format!(
                "row {}: cumulative value {}",
                i + 1,
                r.cumulative_mm
            )));
        }
        if i == 0 {
            continue;
        }
        let prev = &records[i - 1];
        if r.t < prev.t {
            return Err(Error::InvalidGauge(format!("row {}: rows out of time order", i + 1)));
        }
        let step = r.cumulative_mm - prev.cumulative_mm;
        if step < 0.0 {
            return Err(Error::GaugeNotMonotone { row: i + 1 });
        }
        let tips = step / cfg.tip_mm;
        if (tips - tips.round()).abs() > 1e-6 {
            return Err(Error::InvalidGauge(format!(
                "row {}: increment {step} mm is not a multiple of {} mm",
                i + 1,
                cfg.tip_mm
            )));
        }
    }
    Ok(())
}

pub fn read_gauge<R: std::io::Read>(input: R, cfg: &GaugeConfig) -> Result<Vec<GaugeRecord>> {
    let ctx = "gauge log";
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(ctx, e))?;
        if rec.len() < 2 {
            return Err(Error::InvalidGauge(format!("short row {:?}", rec)));
        }
        let t = parse_time(&rec[0])?;
        let cumulative_mm = rec[1]
            .parse::<f64>()
            .map_err(|e| Error::InvalidGauge(format!("cumulative value {:?}: {e}", &rec[1])))?;
        records.push(GaugeRecord { t, cumulative_mm });
    }
    validate_records(&records, cfg)?;
    Ok(records)
}

/// Parses a `timestamp_utc,cumulative_mm` gauge log.
pub fn parse_gauge(path: impl AsRef<Path>, cfg: &GaugeConfig) -> Result<Vec<GaugeRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_gauge(file, cfg)
}

pub fn write_gauge<W: std::io::Write>(out: W, records: &[GaugeRecord]) -> Result<()> {
    let ctx = "gauge log";
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp_utc", "cumulative_mm"])
        .map_err(|e| Error::csv(ctx, e))?;
    for r in records {
        w.write_record([format_time(r.t), format!("{:.2}", r.cumulative_mm)])
            .map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

pub fn load_adjustments(path: impl AsRef<Path>) -> Result<Vec<BoundaryAdjustment>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Groups tips into events separated by more than `event_gap_min` minutes.
pub fn rain_events(records: &[GaugeRecord], cfg: &GaugeConfig) -> Vec<RainEvent> {
    // The first record is the baseline level, not a tip.
    let mut tips: Vec<(Timestamp, f64)> = Vec::new();
    for w in records.windows(2) {
        if w[1].cumulative_mm > w[0].cumulative_mm {
            tips.push((w[1].t, w[0].cumulative_mm));
        }
    }
    let gap = TimeDelta::minutes(cfg.event_gap_min);
    let mut events: Vec<RainEvent> = Vec::new();
    for (t, level_before) in tips {
        match events.last_mut() {
            Some(e) if t - e.last_tip <= gap => e.last_tip = t,
            _ => events.push(RainEvent {
                id: events.len() + 1,
                first_tip: t,
                last_tip: t,
                level_before,
            }),
        }
    }
    events
}

/// Knots of the cumulative curve, with an anchor at each adjusted start
/// that precedes its event's first tip.
fn knots(
    records: &[GaugeRecord],
    events: &[RainEvent],
    adjustments: &[BoundaryAdjustment],
) -> Result<Vec<(Timestamp, f64)>> {
    let mut knots: Vec<(Timestamp, f64)> = records.iter().map(|r| (r.t, r.cumulative_mm)).collect();
    for adj in adjustments {
        let event = events
            .iter()
            .find(|e| e.id == adj.event)
            .ok_or_else(|| Error::InvalidAdjustment {
                event: adj.event,
                reason: "no such gauge event".into(),
            })?;
        if adj.start > event.first_tip || adj.end < event.last_tip {
            return Err(Error::InvalidAdjustment {
                event: adj.event,
                reason: format!(
                    "interval {}..{} does not contain tips {}..{}",
                    format_time(adj.start),
                    format_time(adj.end),
                    format_time(event.first_tip),
                    format_time(event.last_tip)
                ),
            });
        }
        if adj.start < event.first_tip {
            knots.retain(|&(t, _)| !(t >= adj.start && t < event.first_tip));
            let at = knots.partition_point(|&(t, _)| t < adj.start);
            knots.insert(at, (adj.start, event.level_before));
        }
    }
    Ok(knots)
}

/// Piecewise-linear cumulative depth, flat outside the knots.
fn interpolate(knots: &[(Timestamp, f64)], t: Timestamp) -> f64 {
    let Some(&(t_first, v_first)) = knots.first() else {
        return 0.0;
    };
    if t <= t_first {
        return v_first;
    }
    let i = knots.partition_point(|&(k, _)| k <= t);
    if i >= knots.len() {
        return knots[knots.len() - 1].1;
    }
    let (t0, v0) = knots[i - 1];
    let (t1, v1) = knots[i];
    let span = seconds_between(t0, t1);
    if span <= 0.0 {
        return v1;
    }
    v0 + (v1 - v0) * seconds_between(t0, t) / span
}

/// Minute labels from the first minute after `records[0]` through the
/// minute at or after the last record.
pub fn default_label_window(records: &[GaugeRecord]) -> Option<(Timestamp, Timestamp)> {
    let first = records.first()?.t;
    let last = records.last()?.t;
    let minute = TimeDelta::minutes(1);
    let start = first.duration_trunc(minute).ok()? + minute;
    let end = last.duration_round_up(minute).ok()?;
    Some((start, end.max(start)))
}

/// Labels minutes `first..=last`. A label at minute `m` carries the depth
/// accumulated over `(m - 1 min, m]` of the interpolated cumulative curve.
pub fn minute_labels(
    records: &[GaugeRecord],
    adjustments: &[BoundaryAdjustment],
    first: Timestamp,
    last: Timestamp,
    cfg: &GaugeConfig,
) -> Result<Vec<RainLabel>> {
    validate_records(records, cfg)?;
    let events = rain_events(records, cfg);
    let knots = knots(records, &events, adjustments)?;
    let minute = TimeDelta::minutes(1);
    let first = first
        .duration_trunc(minute)
        .map_err(|e| Error::Malformed(e.to_string()))?;

    let mut labels = Vec::new();
    let mut m = first;
    let mut prev = interpolate(&knots, m - minute);
    while m <= last {
        let cur = interpolate(&knots, m);
        let intensity = (cur - prev).max(0.0);
        let adjusted = adjustments.iter().any(|a| m - minute < a.end && m > a.start);
        labels.push(RainLabel {
            minute: m,
            is_raining: adjusted || intensity > 0.0,
            intensity_mm_per_min: intensity,
        });
        prev = cur;
        m += minute;
    }
    Ok(labels)
}

pub fn write_labels<W: std::io::Write>(out: W, labels: &[RainLabel]) -> Result<()> {
    let ctx = "label csv";
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["minute_utc", "is_raining", "intensity_mm_per_min"])
        .map_err(|e| Error::csv(ctx, e))?;
    for l in labels {
        w.write_record([
            format_time(l.minute),
            u8::from(l.is_raining).to_string(),
            l.intensity_mm_per_min.to_string(),
        ])
        .map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<RainLabel>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(&ctx, e))?;
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(&ctx, e))?;
        if rec.len() != 3 {
            return Err(Error::Malformed(format!("{ctx}: expected 3 columns")));
        }
        let is_raining = match &rec[1] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::Malformed(format!("{ctx}: is_raining {other:?}"))),
        };
        let intensity: f64 = rec[2].parse().map_err(|e| Error::Malformed(format!("{ctx}: {e}")))?;
        if intensity < 0.0 || (!is_raining && intensity != 0.0) {
            return Err(Error::Malformed(format!("{ctx}: inconsistent label at {}", &rec[0])));
        }
        labels.push(RainLabel {
            minute: parse_time(&rec[0])?,
            is_raining,
            intensity_mm_per_min: intensity,
        });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn at(h: u32, m: u32) -> Timestamp {
        Utc.with_ymd_and_hms(2023, 9, 18, h, m, 0).unwrap()
    }

    fn rec(h: u32, m: u32, mm: f64) -> GaugeRecord {
        GaugeRecord {
            t: at(h, m),
            cumulative_mm: mm,
        }
    }

    fn cfg() -> GaugeConfig {
        GaugeConfig::default()
    }

    #[test]
    fn empty_log_parses_to_nothing() {
        assert!(read_gauge("".as_bytes(), &cfg()).unwrap().is_empty());
        assert!(read_gauge("timestamp_utc,cumulative_mm\n".as_bytes(), &cfg())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn two_tips_parse() {
        let text = "timestamp_utc,cumulative_mm\n2023-09-18T10:00:00Z,0.22\n2023-09-18T10:03:00Z,0.44\n";
        let r = read_gauge(text.as_bytes(), &cfg()).unwrap();
        assert_eq!(r, vec![rec(10, 0, 0.22), rec(10, 3, 0.44)]);
    }

    #[test]
    fn decreasing_log_is_rejected() {
        let text = "timestamp_utc,cumulative_mm\n2023-09-18T10:00:00Z,0.44\n2023-09-18T10:03:00Z,0.22\n";
        let err = read_gauge(text.as_bytes(), &cfg()).unwrap_err();
        assert!(err.to_string().starts_with("gauge log not monotone"));
    }

    #[test]
    fn non_tip_increment_is_rejected() {
        let text = "timestamp_utc,cumulative_mm\n2023-09-18T10:00:00Z,0.22\n2023-09-18T10:03:00Z,0.30\n";
        assert!(matches!(
            read_gauge(text.as_bytes(), &cfg()),
            Err(Error::InvalidGauge(_))
        ));
    }

    #[test]
    fn interpolated_intensity_between_tips() {
        let records = [rec(10, 0, 0.22), rec(10, 2, 0.44)];
        let labels = minute_labels(&records, &[], at(10, 0), at(10, 3), &cfg()).unwrap();
        let got: Vec<f64> = labels.iter().map(|l| l.intensity_mm_per_min).collect();
        assert_eq!(got.len(), 4);
        assert_eq!(got[0], 0.0);
        assert!((got[1] - 0.11).abs() < 1e-12);
        assert!((got[2] - 0.11).abs() < 1e-12);
        assert_eq!(got[3], 0.0);
        assert!(!labels[0].is_raining && labels[1].is_raining && !labels[3].is_raining);
    }

    #[test]
    fn no_tips_means_dry() {
        let records = [rec(9, 0, 1.1), rec(11, 0, 1.1)];
        let labels = minute_labels(&records, &[], at(10, 0), at(10, 30), &cfg()).unwrap();
        assert_eq!(labels.len(), 31);
        assert!(labels.iter().all(|l| !l.is_raining && l.intensity_mm_per_min == 0.0));
    }

    #[test]
    fn single_tip_with_earlier_adjusted_start() {
        // A dry periodic record, then one tip; rain really began 5 min earlier.
        let records = [rec(9, 0, 0.44), rec(10, 5, 0.66), rec(11, 0, 0.66)];
        let events = rain_events(&records, &cfg());
        assert_eq!(events.len(), 1);
        let adj = BoundaryAdjustment {
            event: 1,
            start: at(10, 0),
            end: at(10, 5),
        };
        let labels = minute_labels(&records, &[adj], at(9, 55), at(10, 10), &cfg()).unwrap();
        let raining: Vec<_> = labels.iter().filter(|l| l.is_raining).collect();
        assert_eq!(raining.len(), 5);
        assert_eq!(raining[0].minute, at(10, 1));
        assert_eq!(raining[4].minute, at(10, 5));
        for l in &raining {
            assert!((l.intensity_mm_per_min - 0.044).abs() < 1e-12);
        }
        let total: f64 = labels.iter().map(|l| l.intensity_mm_per_min).sum();
        assert!((total - 0.22).abs() < 1e-12);
    }

    #[test]
    fn adjustment_excluding_tips_is_rejected() {
        let records = [rec(10, 0, 0.0), rec(10, 5, 0.22), rec(10, 20, 0.44)];
        let adj = BoundaryAdjustment {
            event: 1,
            start: at(10, 6),
            end: at(10, 30),
        };
        assert!(matches!(
            minute_labels(&records, &[adj], at(10, 0), at(10, 30), &cfg()),
            Err(Error::InvalidAdjustment { event: 1, .. })
        ));
        let unknown = BoundaryAdjustment { event: 4, ..adj };
        assert!(minute_labels(&records, &[unknown], at(10, 0), at(10, 30), &cfg()).is_err());
    }

    #[test]
    fn events_split_on_long_gaps() {
        let records = [rec(8, 0, 0.0), rec(8, 10, 0.22), rec(8, 40, 0.44), rec(10, 0, 0.66)];
        let events = rain_events(&records, &cfg());
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].last_tip, at(8, 40));
        assert_eq!(events[1].level_before, 0.44);
    }

    #[test]
    fn default_window_conserves_depth() {
        let records = [rec(10, 0, 0.0), rec(10, 7, 0.22), rec(10, 9, 0.66), rec(10, 30, 0.88)];
        let (a, b) = default_label_window(&records).unwrap();
        let labels = minute_labels(&records, &[], a, b, &cfg()).unwrap();
        let total: f64 = labels.iter().map(|l| l.intensity_mm_per_min).sum();
        assert!((total - 0.88).abs() < 1e-12);
    }

    #[test]
    fn label_csv_round_trip() {
        let labels = vec![
            RainLabel {
                minute: at(10, 0),
                is_raining: false,
                intensity_mm_per_min: 0.0,
            },
            RainLabel {
                minute: at(10, 1),
                is_raining: true,
                intensity_mm_per_min: 0.125,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        write_labels(std::fs::File::create(&path).unwrap(), &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
    }
}
