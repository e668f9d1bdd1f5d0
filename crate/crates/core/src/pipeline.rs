//! Streaming minute extraction and the glue between features, labels and
//! models.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use chrono::{Duration, FixedOffset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoroi::{RoiSet, DEFAULT_TAU_WEAK};
use crate::error::{Error, Result};
use crate::features::{
    audio_features, minute_aggregate, truncate_to_minute, visual_vector, AudioFeatures, MinuteFeature, Thresholds,
    VisualFeatures,
};
use crate::ingest::{audio_windows, sample_pairs, AudioWindows, FrameSource, Timestamp, DEFAULT_PAIR_INTERVAL_S};
use crate::model::{predict_minute, LabeledRow, MinutePrediction, MlpModel, Task, DEFAULT_DETECTION_THRESHOLD};
use crate::rainfall::RainLabel;

/// Pairs in flight between the frame worker and the minute aggregator.
const QUEUE_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub pair_interval: f64,
    pub thresholds: Thresholds,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            pair_interval: DEFAULT_PAIR_INTERVAL_S,
            thresholds: Thresholds::default(),
        }
    }
}

/// Streams minute rows to `sink` in time order. A worker thread decodes
/// frame pairs and computes visual features into a bounded queue, so only
/// one minute of samples is held at a time. Minutes without any frame pair
/// are skipped.
pub fn extract_minutes_with<S, F>(
    source: S,
    audio: Option<&Path>,
    rois: &RoiSet,
    cfg: &ExtractConfig,
    mut sink: F,
) -> Result<usize>
where
    S: FrameSource + Send,
    F: FnMut(MinuteFeature) -> Result<()>,
{
    let start = source.start_time();
    let expected_pairs = (60.0 / cfg.pair_interval).round() as usize;
    let pairs = sample_pairs(source, cfg.pair_interval)?;
    let mut audio_iter = match audio {
        Some(path) => Some(audio_windows(path, start)?),
        None => None,
    };

    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Result<(Timestamp, VisualFeatures)>>(QUEUE_DEPTH);
        let thresholds = cfg.thresholds;
        let worker = scope.spawn(move || {
            for pair in pairs {
                let item = pair.and_then(|p| Ok((p.t(), visual_vector(&p, rois, &thresholds)?)));
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });

        let mut visual_iter = rx.into_iter().peekable();
        let mut pending_audio: Option<(Timestamp, AudioFeatures)> = None;
        let mut emitted = 0;
        let result = (|| -> Result<usize> {
            while let Some(head) = visual_iter.next() {
                let (t, first) = head?;
                let minute = truncate_to_minute(t);
                let mut visuals = vec![first];
                while let Some(Ok((t, _))) = visual_iter.peek() {
                    if truncate_to_minute(*t) != minute {
                        break;
                    }
                    let (_, v) = visual_iter.next().expect("peeked")?;
                    visuals.push(v);
                }
                let mut audios = Vec::new();
                loop {
                    if pending_audio.is_none() {
                        pending_audio = next_audio(audio_iter.as_mut())?;
                    }
                    match pending_audio {
                        Some((t, _)) if truncate_to_minute(t) < minute => pending_audio = None,
                        Some((t, a)) if truncate_to_minute(t) == minute => {
                            audios.push(a);
                            pending_audio = None;
                        }
                        _ => break,
                    }
                }
                if let Some(row) = minute_aggregate(&visuals, &audios, minute, expected_pairs) {
                    sink(row)?;
                    emitted += 1;
                }
            }
            Ok(emitted)
        })();
        // Unblock the worker if we stopped early.
        drop(visual_iter);
        worker.join().expect("feature worker panicked");
        result
    })
}

pub fn extract_minutes<S: FrameSource + Send>(
    source: S,
    audio: Option<&Path>,
    rois: &RoiSet,
    cfg: &ExtractConfig,
) -> Result<Vec<MinuteFeature>> {
    let mut rows = Vec::new();
    extract_minutes_with(source, audio, rois, cfg, |r| {
        rows.push(r);
        Ok(())
    })?;
    Ok(rows)
}

fn next_audio(it: Option<&mut AudioWindows>) -> Result<Option<(Timestamp, AudioFeatures)>> {
    match it.and_then(Iterator::next) {
        Some(w) => {
            let w = w?;
            Ok(Some((w.t_start, audio_features(&w))))
        }
        None => Ok(None),
    }
}

/// Gauge labels are stamped at the end of the minute they cover, feature
/// rows at its start. This re-stamps labels to the feature convention so
/// the two join on equal timestamps.
pub fn labels_by_minute_start(labels: &[RainLabel]) -> Vec<RainLabel> {
    labels
        .iter()
        .map(|l| RainLabel {
            minute: l.minute - Duration::minutes(1),
            ..*l
        })
        .collect()
}

/// Joins feature rows with start-stamped labels. Detector rows get 0/1
/// targets; estimator rows carry the minute's intensity, zero when dry, so
/// the regression also sees what no rain looks like.
pub fn labeled_rows(
    features: &[MinuteFeature],
    labels: &[RainLabel],
    task: Task,
    complete_only: bool,
) -> Vec<LabeledRow> {
    let by_minute: BTreeMap<Timestamp, &RainLabel> = labels.iter().map(|l| (l.minute, l)).collect();
    let mut unmatched = 0;
    let rows: Vec<LabeledRow> = features
        .iter()
        .filter(|f| f.complete || !complete_only)
        .filter_map(|f| {
            let Some(l) = by_minute.get(&f.minute) else {
                unmatched += 1;
                return None;
            };
            match task {
                Task::Detector => Some(LabeledRow {
                    features: f.row(),
                    label: if l.is_raining { 1.0 } else { 0.0 },
                }),
                Task::Estimator => Some(LabeledRow {
                    features: f.row(),
                    label: l.intensity_mm_per_min,
                }),
            }
        })
        .collect();
    if unmatched > 0 {
        log::warn!("{unmatched} feature minutes have no label");
    }
    rows
}

pub fn predict_minutes(
    detector: &MlpModel,
    estimator: &MlpModel,
    features: &[MinuteFeature],
) -> Result<Vec<MinutePrediction>> {
    features
        .iter()
        .map(|f| predict_minute(detector, estimator, f))
        .collect()
}

/// Every tunable constant and input path of a run, in one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub rois: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub estimator: Option<PathBuf>,
    pub gauge: Option<PathBuf>,
    pub et_source: Option<String>,
    pub zones: Option<PathBuf>,
    pub detection_threshold: f64,
    pub tau_weak: f64,
    pub tau_high: f64,
    pub tau_bright: f64,
    /// Seconds between sampled frame pairs.
    pub pair_interval: f64,
    /// Local-day offset for daily totals, e.g. `+00:00` or `-05:00`.
    pub timezone: String,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let th = Thresholds::default();
        PipelineConfig {
            manifest: None,
            rois: None,
            detector: None,
            estimator: None,
            gauge: None,
            et_source: None,
            zones: None,
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
            tau_weak: DEFAULT_TAU_WEAK,
            tau_high: th.tau_high,
            tau_bright: th.tau_bright,
            pair_interval: DEFAULT_PAIR_INTERVAL_S,
            timezone: "+00:00".into(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("detection_threshold", self.detection_threshold),
            ("tau_weak", self.tau_weak),
            ("tau_high", self.tau_high),
            ("tau_bright", self.tau_bright),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.pair_interval > 0.0) {
            return Err(Error::InvalidConfig(format!("pair_interval {}", self.pair_interval)));
        }
        self.tz()?;
        Ok(())
    }

    pub fn tz(&self) -> Result<FixedOffset> {
        parse_offset(&self.timezone)
    }

    pub fn extract(&self) -> ExtractConfig {
        ExtractConfig {
            pair_interval: self.pair_interval,
            thresholds: Thresholds {
                tau_high: self.tau_high,
                tau_bright: self.tau_bright,
            },
        }
    }

    /// SHA-256 of the canonical JSON form, logged with every run.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }
}

/// Parses `Z`, `UTC` or a `±HH:MM` offset.
pub fn parse_offset(s: &str) -> Result<FixedOffset> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("z") || s.eq_ignore_ascii_case("utc") {
        return Ok(FixedOffset::east_opt(0).expect("zero offset"));
    }
    s.parse::<FixedOffset>()
        .map_err(|e| Error::InvalidConfig(format!("timezone {s:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoroi::Roi;
    use crate::synth::{gen_scene, RainProfile, SceneFrames, SceneSpec};
    use chrono::{TimeZone, Utc};

    fn spec(minutes: usize) -> SceneSpec {
        SceneSpec {
            video_id: "p".into(),
            width: 48,
            height: 32,
            frame_rate: 0.4,
            start_time: Utc.with_ymd_and_hms(2023, 7, 1, 10, 0, 0).unwrap(),
            duration_min: minutes,
            reflection_regions: vec![Roi {
                id: 1,
                x_lo: 4,
                y_lo: 4,
                x_hi: 20,
                y_hi: 20,
            }],
            distractors: vec![],
            light_schedule: vec![],
            night_factor: 0.6,
            splash_delay_min: 2,
            audio_sample_rate: Some(1000),
            audio_noise: 0.01,
            seed: 3,
        }
    }

    fn rois() -> RoiSet {
        RoiSet::new(
            vec![Roi {
                id: 1,
                x_lo: 4,
                y_lo: 4,
                x_hi: 20,
                y_hi: 20,
            }],
            String::new(),
        )
        .unwrap()
    }

    #[test]
    fn minutes_are_complete_with_audio() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(3);
        let profile = RainProfile::with_events(3, &[(1, 1, 0.3)]);
        let out = gen_scene(&s, &profile, dir.path()).unwrap();
        let m = crate::ingest::StreamManifest::load(&out.manifest).unwrap();
        let src = crate::ingest::open_stream(&m).unwrap();
        let rows = extract_minutes(&src, m.audio_path.as_deref(), &rois(), &ExtractConfig::default()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.complete));
        assert_eq!(rows[0].minute, s.start_time);
        assert!(rows[1].visual[2] > rows[0].visual[2]);
        assert!(rows[1].audio[1] > rows[0].audio[1]);

        let labels = labels_by_minute_start(&crate::rainfall::read_labels(&out.labels).unwrap());
        let det = labeled_rows(&rows, &labels, Task::Detector, false);
        assert_eq!(det.iter().map(|r| r.label).collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        let est = labeled_rows(&rows, &labels, Task::Estimator, false);
        assert_eq!(est.iter().map(|r| r.label).collect::<Vec<_>>(), vec![0.0, 0.3, 0.0]);
    }

    #[test]
    fn video_only_minutes_are_incomplete() {
        let s = spec(2);
        let scene = SceneFrames::new(&s, &RainProfile::dry(2)).unwrap();
        let rows = extract_minutes(&scene, None, &rois(), &ExtractConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| !r.complete && r.audio == [0.0; 5]));
    }

    #[test]
    fn sink_errors_stop_extraction() {
        let s = spec(3);
        let scene = SceneFrames::new(&s, &RainProfile::dry(3)).unwrap();
        let mut seen = 0;
        let err = extract_minutes_with(&scene, None, &rois(), &ExtractConfig::default(), |_| {
            seen += 1;
            Err(Error::Malformed("stop".into()))
        });
        assert!(err.is_err());
        assert_eq!(seen, 1);
    }

    #[test]
    fn config_defaults_and_hash() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), PipelineConfig::default().hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(c.hash(), d.hash());
        d.tau_weak = 1.5;
        assert!(d.validate().is_err());
        assert_eq!(parse_offset("-05:00").unwrap().local_minus_utc(), -5 * 3600);
        assert!(parse_offset("nowhere").is_err());
    }
}
