use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DurationRound, SecondsFormat, TimeDelta};

use super::{row_len, AudioFeatures, VisualFeatures, AUDIO_LEN, VISUAL_PER_ROI};
use crate::error::{Error, Result};
use crate::ingest::Timestamp;

pub const FEATURE_SCHEMA_VERSION: u32 = 1;
const SCHEMA_LINE_PREFIX: &str = "# rainsense-features v";

const VISUAL_NAMES: [&str; VISUAL_PER_ROI] = ["maxdI", "brightness", "density", "variability"];
const AUDIO_NAMES: [&str; AUDIO_LEN] = ["audio_ae", "audio_rmse", "audio_zcr", "audio_sc", "audio_sr"];

pub fn truncate_to_minute(t: Timestamp) -> Timestamp {
    t.duration_trunc(TimeDelta::minutes(1))
        .expect("minute truncation of a UTC timestamp")
}

pub(crate) fn format_time(t: Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub(crate) fn parse_time(s: &str) -> Result<Timestamp> {
    chrono::DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&chrono::Utc))
        .map_err(|e| Error::Malformed(format!("timestamp {s:?}: {e}")))
}

/// One model input row: per-minute means of visual and audio features.
#[derive(Debug, Clone, PartialEq)]
pub struct MinuteFeature {
    pub minute: Timestamp,
    pub visual: Vec<f64>,
    pub audio: [f64; AUDIO_LEN],
    /// Every expected pair and audio second contributed.
    pub complete: bool,
}

impl MinuteFeature {
    pub fn rois(&self) -> usize {
        self.visual.len() / VISUAL_PER_ROI
    }

    /// Visual block followed by the audio block.
    pub fn row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.visual.len() + AUDIO_LEN);
        row.extend_from_slice(&self.visual);
        row.extend_from_slice(&self.audio);
        row
    }
}

/// Averages one minute of samples. Returns `None` (and logs) when the minute
/// has no visual samples. A minute without audio gets zeros in the audio
/// slots and is marked incomplete.
pub fn minute_aggregate(
    visuals: &[VisualFeatures],
    audios: &[AudioFeatures],
    minute: Timestamp,
    expected_pairs: usize,
) -> Option<MinuteFeature> {
    let Some(first) = visuals.first() else {
        log::info!("skipping minute {} without visual samples", format_time(minute));
        return None;
    };
    let width = first.per_roi.len() * VISUAL_PER_ROI;
    let mut visual = vec![0.0; width];
    for v in visuals {
        for (acc, x) in visual.iter_mut().zip(v.to_vec()) {
            *acc += x;
        }
    }
    let n = visuals.len() as f64;
    visual.iter_mut().for_each(|x| *x /= n);

    let mut audio = [0.0; AUDIO_LEN];
    for a in audios {
        for (acc, x) in audio.iter_mut().zip(a.as_array()) {
            *acc += x;
        }
    }
    if !audios.is_empty() {
        let n = audios.len() as f64;
        audio.iter_mut().for_each(|x| *x /= n);
    }

    Some(MinuteFeature {
        minute,
        visual,
        audio,
        complete: visuals.len() == expected_pairs && audios.len() == 60,
    })
}

/// Column names after `minute_utc`, excluding the trailing `complete`.
pub fn feature_names(rois: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(row_len(rois));
    for r in 1..=rois {
        for name in VISUAL_NAMES {
            names.push(format!("roi{r}_{name}"));
        }
    }
    names.extend(AUDIO_NAMES.iter().map(|s| s.to_string()));
    names
}

pub fn write_feature_csv<W: Write>(out: W, rows: &[MinuteFeature], rois: usize) -> Result<()> {
    let mut out = out;
    writeln!(out, "{SCHEMA_LINE_PREFIX}{FEATURE_SCHEMA_VERSION}").map_err(|e| Error::io("feature csv", e))?;
    let mut w = csv::Writer::from_writer(out);
    let ctx = "feature csv";
    let mut header = vec!["minute_utc".to_string()];
    header.extend(feature_names(rois));
    header.push("complete".into());
    w.write_record(&header).map_err(|e| Error::csv(ctx, e))?;
    for row in rows {
        if row.rois() != rois {
            return Err(Error::DimensionMismatch(format!(
                "row for {} has {} regions, expected {rois}",
                format_time(row.minute),
                row.rois()
            )));
        }
        let mut rec = vec![format_time(row.minute)];
        rec.extend(row.row().iter().map(|v| v.to_string()));
        rec.push(u8::from(row.complete).to_string());
        w.write_record(&rec).map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io("feature csv", e))
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<MinuteFeature>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let version = first
        .trim()
        .strip_prefix(SCHEMA_LINE_PREFIX)
        .and_then(|v| v.parse::<u32>().ok());
    if version != Some(FEATURE_SCHEMA_VERSION) {
        return Err(Error::Malformed(format!(
            "{ctx}: expected feature schema v{FEATURE_SCHEMA_VERSION}"
        )));
    }
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| Error::csv(&ctx, e))?.clone();
    let width = header.len();
    if width < 2 + AUDIO_LEN || !(width - 2 - AUDIO_LEN).is_multiple_of(VISUAL_PER_ROI) {
        return Err(Error::Malformed(format!("{ctx}: {width} columns")));
    }
    let rois = (width - 2 - AUDIO_LEN) / VISUAL_PER_ROI;
    let expected: Vec<String> = std::iter::once("minute_utc".to_string())
        .chain(feature_names(rois))
        .chain(std::iter::once("complete".to_string()))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Malformed(format!("{ctx}: unexpected header")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(&ctx, e))?;
        let minute = parse_time(&rec[0])?;
        let values: Vec<f64> = (1..width - 1)
            .map(|i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Malformed(format!("{ctx}: {e}")))
            })
            .collect::<Result<_>>()?;
        let complete = match &rec[width - 1] {
            "1" => true,
            "0" => false,
            other => return Err(Error::Malformed(format!("{ctx}: complete flag {other:?}"))),
        };
        let split = rois * VISUAL_PER_ROI;
        let mut audio = [0.0; AUDIO_LEN];
        audio.copy_from_slice(&values[split..]);
        rows.push(MinuteFeature {
            minute,
            visual: values[..split].to_vec(),
            audio,
            complete,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RoiFeatures;
    use chrono::{TimeZone, Utc};

    fn minute() -> Timestamp {
        Utc.with_ymd_and_hms(2023, 9, 18, 10, 1, 0).unwrap()
    }

    fn vis(max: f64) -> VisualFeatures {
        VisualFeatures {
            per_roi: vec![RoiFeatures {
                max_delta: max,
                brightness: 0.2,
                density: 0.1,
                variability: 3,
            }],
        }
    }

    #[test]
    fn identical_vectors_average_to_themselves() {
        let v = vec![vis(0.4); 12];
        let a = vec![
            AudioFeatures {
                ae: 0.5,
                rmse: 0.2,
                zcr: 0.1,
                sc: 900.0,
                sr: 1500.0
            };
            60
        ];
        let m = minute_aggregate(&v, &a, minute(), 12).unwrap();
        for (x, y) in m.visual.iter().zip(vis(0.4).to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in m.audio.iter().zip(a[0].as_array()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(m.complete);
        assert_eq!(m.row().len(), row_len(1));
    }

    #[test]
    fn single_outlier_is_damped() {
        let mut v = vec![vis(0.0); 11];
        v.push(vis(1.0));
        let m = minute_aggregate(&v, &[AudioFeatures::default(); 60], minute(), 12).unwrap();
        assert!((m.visual[0] - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn missing_audio_fills_zeros_and_marks_incomplete() {
        let m = minute_aggregate(&vec![vis(0.3); 12], &[], minute(), 12).unwrap();
        assert_eq!(m.audio, [0.0; 5]);
        assert!(!m.complete);
    }

    #[test]
    fn minute_without_visuals_is_skipped() {
        assert!(minute_aggregate(&[], &[AudioFeatures::default()], minute(), 12).is_none());
    }

    #[test]
    fn truncation_drops_seconds() {
        let t = Utc.with_ymd_and_hms(2023, 9, 18, 10, 1, 59).unwrap() + chrono::Duration::milliseconds(900);
        assert_eq!(truncate_to_minute(t), minute());
    }

    #[test]
    fn header_names_follow_layout() {
        let names = feature_names(2);
        assert_eq!(names[0], "roi1_maxdI");
        assert_eq!(names[7], "roi2_variability");
        assert_eq!(names.last().unwrap(), "audio_sr");
        assert_eq!(names.len(), 13);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let rows = vec![
            minute_aggregate(&vec![vis(0.25); 12], &[], minute(), 12).unwrap(),
            minute_aggregate(
                &[vis(0.1 + 0.2)],
                &[AudioFeatures {
                    ae: 0.3,
                    ..Default::default()
                }],
                minute() + chrono::Duration::minutes(1),
                12,
            )
            .unwrap(),
        ];
        write_feature_csv(std::fs::File::create(&path).unwrap(), &rows, 1).unwrap();
        assert_eq!(read_feature_csv(&path).unwrap(), rows);
    }
}
