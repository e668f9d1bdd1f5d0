//! Synthetic camera scenes with known rainfall, written in the same formats
//! the ingest module reads.
//!
//! Rain shows up as random bright "drop" pixels inside reflection regions:
//! the per-frame drop probability and the drop amplitude both grow with the
//! minute's intensity, so every visual feature is a monotone function of it.
//! The audio track is noise plus a Poisson train of short clicks whose rate
//! is proportional to intensity.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::autoroi::{LightClass, RainPeriodHint, Roi};
use crate::error::{Error, Result};
use crate::ingest::{frame_file_name, offset_seconds, FrameSource, GrayFrame, StreamManifest, Timestamp};
use crate::rainfall::{write_labels, RainLabel};

/// Peak per-pixel drop probability inside a region under very heavy rain.
pub const MAX_DROP_PROBABILITY: f64 = 0.3;
/// Intensity (mm/min) at which drop probability reaches 63% of its peak.
pub const DROP_SCALE_MM: f64 = 0.5;
/// Clicks per second of audio for each mm/min of rain.
pub const CLICKS_PER_MM: f64 = 150.0;

const NIGHT_BACKGROUND: f64 = 0.35;
const DRIZZLE_FRACTION: f64 = 0.05;
const DRIZZLE_LEVELS: f64 = 12.0;
const SPLASH_ROWS: f64 = 0.25;
const CLICK_DECAY_S: f64 = 0.0015;
const BACKGROUND_STREAM: u64 = 0;
const AUDIO_STREAM: u64 = u64::MAX;

/// Fraction of region pixels carrying a drop in one frame.
pub fn drop_probability(intensity: f64) -> f64 {
    MAX_DROP_PROBABILITY * (1.0 - (-intensity / DROP_SCALE_MM).exp())
}

/// Nominal drop brightness in 0..255 levels at full contrast.
pub fn drop_amplitude(intensity: f64) -> f64 {
    50.0 + 140.0 * (1.0 - (-intensity / 0.3).exp())
}

fn default_frame_rate() -> f64 {
    0.4
}

fn default_night_factor() -> f64 {
    0.6
}

fn default_splash_delay() -> usize {
    2
}

fn default_sample_rate() -> Option<u32> {
    Some(2000)
}

fn default_audio_noise() -> f64 {
    0.01
}

/// Minutes `[start_min, end_min)` under one lighting condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightSegment {
    pub start_min: usize,
    pub end_min: usize,
    pub light: LightClass,
}

/// A bright disc moving in a straight line between two pixel positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorTrack {
    pub start_s: f64,
    pub end_s: f64,
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub radius: f64,
    /// Added luminance, on the 0..1 scale.
    pub brightness: f64,
}

impl DistractorTrack {
    fn position(&self, t_s: f64) -> Option<[f64; 2]> {
        if t_s < self.start_s || t_s > self.end_s {
            return None;
        }
        let f = if self.end_s > self.start_s {
            (t_s - self.start_s) / (self.end_s - self.start_s)
        } else {
            0.0
        };
        Some([
            self.from[0] + f * (self.to[0] - self.from[0]),
            self.from[1] + f * (self.to[1] - self.from[1]),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    pub start_time: Timestamp,
    pub duration_min: usize,
    pub reflection_regions: Vec<Roi>,
    #[serde(default)]
    pub distractors: Vec<DistractorTrack>,
    /// Minutes not covered by a segment are daylight.
    #[serde(default)]
    pub light_schedule: Vec<LightSegment>,
    /// Multiplier on drop contrast at night.
    #[serde(default = "default_night_factor")]
    pub night_factor: f64,
    /// Minutes of continuous rain before splashes appear at region bottoms.
    #[serde(default = "default_splash_delay")]
    pub splash_delay_min: usize,
    /// `None` writes no audio track.
    #[serde(default = "default_sample_rate")]
    pub audio_sample_rate: Option<u32>,
    #[serde(default = "default_audio_noise")]
    pub audio_noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_min as f64 * 60.0
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s() * self.frame_rate).round() as usize
    }

    pub fn light_at(&self, minute: usize) -> LightClass {
        self.light_schedule
            .iter()
            .find(|s| (s.start_min..s.end_min).contains(&minute))
            .map_or(LightClass::Day, |s| s.light)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("scene {}: {msg}", self.video_id)));
        if self.width == 0 || self.height == 0 {
            return bad("empty frame".into());
        }
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return bad(format!("frame rate {}", self.frame_rate));
        }
        if self.duration_min == 0 {
            return bad("zero duration".into());
        }
        if let Some(r) = self
            .reflection_regions
            .iter()
            .find(|r| !r.fits(self.width, self.height) || r.area() == 0)
        {
            return bad(format!("reflection region {r:?} outside the frame"));
        }
        if !(self.night_factor > 0.0 && self.night_factor <= 1.0) {
            return bad(format!("night factor {}", self.night_factor));
        }
        if self.audio_sample_rate == Some(0) || !(self.audio_noise >= 0.0) {
            return bad("audio settings".into());
        }
        for d in &self.distractors {
            if !(d.end_s >= d.start_s && d.radius > 0.0 && (0.0..=1.0).contains(&d.brightness)) {
                return bad(format!("distractor {d:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainProfile {
    pub intensity_mm_per_min: Vec<f64>,
}

impl RainProfile {
    pub fn dry(minutes: usize) -> Self {
        RainProfile {
            intensity_mm_per_min: vec![0.0; minutes],
        }
    }

    /// Dry profile with `(start_min, len_min, intensity)` events painted in.
    pub fn with_events(minutes: usize, events: &[(usize, usize, f64)]) -> Self {
        let mut p = RainProfile::dry(minutes);
        for &(start, len, i) in events {
            for m in start..(start + len).min(minutes) {
                p.intensity_mm_per_min[m] = i;
            }
        }
        p
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }

    pub fn at(&self, minute: usize) -> f64 {
        self.intensity_mm_per_min.get(minute).copied().unwrap_or(0.0)
    }

    pub fn total_mm(&self) -> f64 {
        self.intensity_mm_per_min.iter().sum()
    }

    pub fn validate(&self, minutes: usize) -> Result<()> {
        if self.intensity_mm_per_min.len() > minutes {
            return Err(Error::InvalidConfig(format!(
                "rain profile has {} minutes, scene only {minutes}",
                self.intensity_mm_per_min.len()
            )));
        }
        if let Some(v) = self.intensity_mm_per_min.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidConfig(format!("rain intensity {v}")));
        }
        Ok(())
    }

    /// Ground-truth labels, stamped at the end of each minute like gauge
    /// labels: profile minute `j` becomes the label at `start + j + 1` min.
    pub fn labels(&self, start: Timestamp, minutes: usize) -> Vec<RainLabel> {
        (0..minutes)
            .map(|j| {
                let i = self.at(j);
                RainLabel {
                    minute: start + Duration::minutes(j as i64 + 1),
                    is_raining: i > 0.0,
                    intensity_mm_per_min: i,
                }
            })
            .collect()
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Renders frames on demand; the in-memory counterpart of a written scene.
#[derive(Debug, Clone)]
pub struct SceneFrames {
    spec: SceneSpec,
    profile: RainProfile,
    background: Vec<u8>,
    /// Consecutive rainy minutes ending at each minute.
    rain_run: Vec<usize>,
    /// Per pixel: index of the reflection region containing it, if any.
    region_of: Vec<Option<u16>>,
}

impl SceneFrames {
    pub fn new(spec: &SceneSpec, profile: &RainProfile) -> Result<Self> {
        spec.validate()?;
        profile.validate(spec.duration_min)?;
        let mut rng = stream_rng(spec.seed, BACKGROUND_STREAM);
        let background = (0..spec.width * spec.height)
            .map(|_| rng.gen_range(60u8..=160))
            .collect();
        let mut rain_run = Vec::with_capacity(spec.duration_min);
        let mut run = 0;
        for m in 0..spec.duration_min {
            run = if profile.at(m) > 0.0 { run + 1 } else { 0 };
            rain_run.push(run);
        }
        let mut region_of = vec![None; spec.width * spec.height];
        for (ri, r) in spec.reflection_regions.iter().enumerate() {
            for y in r.y_lo..r.y_hi {
                for x in r.x_lo..r.x_hi {
                    region_of[y * spec.width + x].get_or_insert(ri as u16);
                }
            }
        }
        Ok(SceneFrames {
            spec: spec.clone(),
            profile: profile.clone(),
            background,
            rain_run,
            region_of,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    fn minute_of(&self, t_s: f64) -> usize {
        ((t_s / 60.0).floor() as usize).min(self.spec.duration_min - 1)
    }

    /// 8-bit luminance of frame `index`.
    pub fn render(&self, index: usize) -> Vec<u8> {
        let spec = &self.spec;
        let t_s = index as f64 / spec.frame_rate;
        let minute = self.minute_of(t_s);
        let intensity = self.profile.at(minute);
        let night = spec.light_at(minute) == LightClass::Night;
        let contrast = if night { spec.night_factor } else { 1.0 };
        let bg_scale = if night { NIGHT_BACKGROUND } else { 1.0 };
        let p = drop_probability(intensity);
        let amp = contrast * drop_amplitude(intensity);
        let wet = self.rain_run[minute] > spec.splash_delay_min;
        let mut rng = stream_rng(spec.seed, index as u64 + 1);

        let mut out = Vec::with_capacity(spec.width * spec.height);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let i = y * spec.width + x;
                let noise = f64::from(rng.gen_range(-1i8..=1));
                let mut v = f64::from(self.background[i]) * bg_scale + noise;
                if p > 0.0 {
                    match self.region_of[i] {
                        Some(ri) => {
                            if rng.gen_bool(p) {
                                v += amp * rng.gen_range(0.7..1.0);
                            }
                            let r = &spec.reflection_regions[usize::from(ri)];
                            let splash_from = r.y_hi as f64 - SPLASH_ROWS * r.height() as f64;
                            if wet && y as f64 >= splash_from && rng.gen_bool(0.5 * p) {
                                v += 0.8 * amp;
                            }
                        }
                        None => {
                            if rng.gen_bool(DRIZZLE_FRACTION * p) {
                                v += contrast * DRIZZLE_LEVELS;
                            }
                        }
                    }
                }
                out.push(v);
            }
        }
        for d in &spec.distractors {
            let Some([cx, cy]) = d.position(t_s) else {
                continue;
            };
            let r = d.radius;
            let y0 = (cy - r).floor().max(0.0) as usize;
            let y1 = ((cy + r).ceil() as usize).min(spec.height.saturating_sub(1));
            let x0 = (cx - r).floor().max(0.0) as usize;
            let x1 = ((cx + r).ceil() as usize).min(spec.width.saturating_sub(1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        out[y * spec.width + x] += 255.0 * d.brightness;
                    }
                }
            }
        }
        out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

impl FrameSource for SceneFrames {
    fn frame_rate(&self) -> f64 {
        self.spec.frame_rate
    }

    fn len(&self) -> usize {
        self.spec.frame_count()
    }

    fn timestamp(&self, index: usize) -> Timestamp {
        offset_seconds(self.spec.start_time, index as f64 / self.spec.frame_rate)
    }

    fn frame(&self, index: usize) -> Result<GrayFrame> {
        GrayFrame::from_gray8(
            self.spec.width,
            self.spec.height,
            self.timestamp(index),
            &self.render(index),
        )
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One-second blocks of synthetic rain audio in `[-1, 1]`.
pub struct AudioSynth<'a> {
    spec: &'a SceneSpec,
    profile: &'a RainProfile,
    sample_rate: u32,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    carry: Vec<f64>,
    second: usize,
}

impl<'a> AudioSynth<'a> {
    pub fn new(spec: &'a SceneSpec, profile: &'a RainProfile, sample_rate: u32) -> Result<Self> {
        let noise =
            Normal::new(0.0, spec.audio_noise).map_err(|e| Error::InvalidConfig(format!("audio noise: {e}")))?;
        Ok(AudioSynth {
            spec,
            profile,
            sample_rate,
            rng: stream_rng(spec.seed, AUDIO_STREAM),
            noise,
            carry: Vec::new(),
            second: 0,
        })
    }
}

impl Iterator for AudioSynth<'_> {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.second as f64 >= self.spec.duration_s() {
            return None;
        }
        let sr = self.sample_rate as usize;
        let decay = (CLICK_DECAY_S * self.sample_rate as f64).max(1.0);
        let tail = (6.0 * decay).ceil() as usize;
        let mut buf = vec![0.0; sr + tail];
        for (b, c) in buf.iter_mut().zip(self.carry.drain(..)) {
            *b += c;
        }
        let intensity = self.profile.at(self.second / 60);
        let rate = CLICKS_PER_MM * intensity;
        if rate > 0.0 {
            let clicks = Poisson::new(rate).map_or(0, |d| d.sample(&mut self.rng) as usize);
            for _ in 0..clicks {
                let at = self.rng.gen_range(0..sr);
                let amp = self.rng.gen_range(0.15..0.5);
                let sign = if self.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                for k in 0..tail {
                    let alternating = if k % 2 == 0 { 1.0 } else { -1.0 };
                    buf[at + k] += sign * alternating * amp * (-(k as f64) / decay).exp();
                }
            }
        }
        self.carry = buf.split_off(sr);
        for s in &mut buf {
            *s = (*s + self.noise.sample(&mut self.rng)).clamp(-1.0, 1.0);
        }
        self.second += 1;
        Some(buf)
    }
}

/// Rain hints covering each run of rainy minutes, split where the light
/// changes.
pub fn rain_hints(spec: &SceneSpec, profile: &RainProfile) -> Vec<RainPeriodHint> {
    let at = |m: usize| spec.start_time + Duration::minutes(m as i64);
    let mut hints = Vec::new();
    let mut open: Option<(usize, LightClass)> = None;
    for m in 0..=spec.duration_min {
        let here = (m < spec.duration_min && profile.at(m) > 0.0).then(|| spec.light_at(m));
        if let Some((start, light)) = open {
            if here != Some(light) {
                hints.push(RainPeriodHint {
                    start: at(start),
                    end: at(m),
                    light_class: light,
                });
                open = None;
            }
        }
        if open.is_none() {
            open = here.map(|l| (m, l));
        }
    }
    hints
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutput {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub hints: PathBuf,
}

fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write!(w, "P5\n{width} {height}\n255\n")
        .and_then(|_| w.write_all(data))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_audio(path: &Path, spec: &SceneSpec, profile: &RainProfile, sample_rate: u32) -> Result<()> {
    let wav_spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let corrupt = |e: hound::Error| Error::CorruptAudio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, wav_spec).map_err(corrupt)?;
    for block in AudioSynth::new(spec, profile, sample_rate)? {
        for s in block {
            w.write_sample((s * 32767.0).round() as i16).map_err(corrupt)?;
        }
    }
    w.finalize().map_err(corrupt)
}

/// Writes `frames/`, `audio.wav`, `labels.csv`, `hints.json` and
/// `manifest.json` under `out`.
pub fn gen_scene(spec: &SceneSpec, profile: &RainProfile, out: impl AsRef<Path>) -> Result<SceneOutput> {
    let out = out.as_ref();
    let scene = SceneFrames::new(spec, profile)?;
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for i in 0..spec.frame_count() {
        let path = frames_dir.join(frame_file_name(i, "pgm"));
        write_pgm(&path, spec.width, spec.height, &scene.render(i))?;
    }

    let audio_path = match spec.audio_sample_rate {
        Some(sr) => {
            let path = out.join("audio.wav");
            write_audio(&path, spec, profile, sr)?;
            Some(PathBuf::from("audio.wav"))
        }
        None => None,
    };

    let labels = out.join("labels.csv");
    let file = File::create(&labels).map_err(|e| Error::io(&labels, e))?;
    write_labels(
        BufWriter::new(file),
        &profile.labels(spec.start_time, spec.duration_min),
    )?;

    let hints = out.join("hints.json");
    let text = serde_json::to_string_pretty(&rain_hints(spec, profile)).map_err(|e| Error::json("hints", e))?;
    std::fs::write(&hints, text).map_err(|e| Error::io(&hints, e))?;

    let manifest = StreamManifest {
        video_id: spec.video_id.clone(),
        frames: PathBuf::from("frames"),
        frame_rate: spec.frame_rate,
        start_time: spec.start_time,
        audio_path,
        duration: spec.duration_s(),
        frame_times: None,
    };
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(SceneOutput {
        dir: out.to_path_buf(),
        manifest: manifest_path,
        labels,
        hints,
    })
}

/// Adds a distractor to `spec`. The track must fall on dry minutes only.
pub fn gen_distractor(spec: &SceneSpec, track: DistractorTrack, profile: &RainProfile) -> Result<SceneSpec> {
    let first = (track.start_s / 60.0).floor().max(0.0) as usize;
    let last = (track.end_s / 60.0).floor().max(0.0) as usize;
    if track.end_s > spec.duration_s() {
        return Err(Error::InvalidConfig("distractor outlasts the scene".into()));
    }
    if let Some(m) = (first..=last).find(|&m| profile.at(m) > 0.0) {
        return Err(Error::InvalidConfig(format!("distractor crosses rainy minute {m}")));
    }
    let mut out = spec.clone();
    out.distractors.push(track);
    out.validate()?;
    Ok(out)
}
