//! Frame and audio ingestion.
//!
//! A stream is described by a JSON [`StreamManifest`]: a directory of
//! pre-decoded frames named `000000.pgm`, `000001.pgm`, ... (PNG is also
//! accepted) plus an optional RIFF/WAV track. Frames are decoded lazily, so a
//! [`FrameSource`] only touches the files a consumer actually asks for.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Luma weights applied to RGB input before normalization.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Default spacing between sampled frame pairs, in seconds.
pub const DEFAULT_PAIR_INTERVAL_S: f64 = 5.0;

/// Tolerated mismatch between the audio track and the declared duration.
const AUDIO_DURATION_SLACK_S: f64 = 1.0;

pub(crate) fn offset_seconds(start: Timestamp, secs: f64) -> Timestamp {
    start + Duration::nanoseconds((secs * 1e9).round() as i64)
}

pub(crate) fn seconds_between(a: Timestamp, b: Timestamp) -> f64 {
    (b - a).num_nanoseconds().unwrap_or(i64::MAX) as f64 * 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub video_id: String,
    /// Directory holding the numbered frame images.
    pub frames: PathBuf,
    pub frame_rate: f64,
    pub start_time: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    /// Seconds.
    pub duration: f64,
    /// Optional per-frame offsets from `start_time` in seconds, for sources
    /// whose frames are not evenly spaced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_times: Option<Vec<f64>>,
}

impl StreamManifest {
    /// Reads a manifest, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut manifest: StreamManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if manifest.frames.is_relative() {
            manifest.frames = base.join(&manifest.frames);
        }
        if let Some(audio) = manifest.audio_path.as_mut() {
            if audio.is_relative() {
                *audio = base.join(&*audio);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn frame_count(&self) -> usize {
        match &self.frame_times {
            Some(times) => times.len(),
            None => (self.duration * self.frame_rate).round().max(0.0) as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::EmptyStream);
        }
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return Err(Error::InvalidManifest(format!(
                "frame_rate must be positive, got {}",
                self.frame_rate
            )));
        }
        if self.frame_count() == 0 {
            return Err(Error::EmptyStream);
        }
        if let Some(times) = &self.frame_times {
            for (i, w) in times.windows(2).enumerate() {
                if !(w[1] > w[0]) {
                    return Err(Error::NonMonotonicTimestamps { index: i + 1 });
                }
            }
        }
        Ok(())
    }
}

/// A timestamped luminance image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    t: Timestamp,
    pixels: Vec<f64>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, t: Timestamp, pixels: Vec<f64>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} frame with {} pixels",
                width,
                height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::DimensionMismatch(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(GrayFrame {
            width,
            height,
            t,
            pixels,
        })
    }

    pub fn from_gray8(width: usize, height: usize, t: Timestamp, data: &[u8]) -> Result<Self> {
        let pixels = data.iter().map(|&v| f64::from(v) / 255.0).collect();
        GrayFrame::new(width, height, t, pixels)
    }

    /// Interleaved RGB triples, converted with [`LUMA_WEIGHTS`].
    pub fn from_rgb8(width: usize, height: usize, t: Timestamp, data: &[u8]) -> Result<Self> {
        let pixels = data
            .chunks_exact(3)
            .map(|px| {
                let luma = LUMA_WEIGHTS[0] * f64::from(px[0])
                    + LUMA_WEIGHTS[1] * f64::from(px[1])
                    + LUMA_WEIGHTS[2] * f64::from(px[2]);
                (luma / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        GrayFrame::new(width, height, t, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn t(&self) -> Timestamp {
        self.t
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// Two adjacent frames of one stream; `t` is the timestamp of `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub a: GrayFrame,
    pub b: GrayFrame,
}

impl FramePair {
    pub fn new(a: GrayFrame, b: GrayFrame) -> Result<Self> {
        if a.width != b.width || a.height != b.height {
            return Err(Error::DimensionMismatch(format!(
                "pair frames {}x{} vs {}x{}",
                a.width, a.height, b.width, b.height
            )));
        }
        if a.t >= b.t {
            return Err(Error::NonMonotonicTimestamps { index: 1 });
        }
        Ok(FramePair { a, b })
    }

    pub fn t(&self) -> Timestamp {
        self.b.t
    }
}

/// Random-access, lazily decoded sequence of frames in timestamp order.
pub trait FrameSource {
    fn frame_rate(&self) -> f64;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn timestamp(&self, index: usize) -> Timestamp;

    fn frame(&self, index: usize) -> Result<GrayFrame>;

    fn start_time(&self) -> Timestamp {
        self.timestamp(0)
    }

    /// Seconds covered by the stream at its nominal frame rate.
    fn duration(&self) -> f64 {
        self.len() as f64 / self.frame_rate()
    }

    fn frames(&self) -> Frames<'_, Self>
    where
        Self: Sized,
    {
        Frames { source: self, next: 0 }
    }
}

impl<S: FrameSource + ?Sized> FrameSource for &S {
    fn frame_rate(&self) -> f64 {
        (**self).frame_rate()
    }
    fn len(&self) -> usize {
        (**self).len()
    }
    fn timestamp(&self, index: usize) -> Timestamp {
        (**self).timestamp(index)
    }
    fn frame(&self, index: usize) -> Result<GrayFrame> {
        (**self).frame(index)
    }
}

pub struct Frames<'a, S: FrameSource> {
    source: &'a S,
    next: usize,
}

impl<S: FrameSource> Iterator for Frames<'_, S> {
    type Item = Result<GrayFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.source.len() {
            return None;
        }
        let frame = self.source.frame(self.next);
        self.next += 1;
        Some(frame)
    }
}

/// Frames stored as numbered PGM/PNG files in one directory.
#[derive(Debug, Clone)]
pub struct DirFrameSource {
    manifest: StreamManifest,
    files: Vec<PathBuf>,
}

impl DirFrameSource {
    pub fn manifest(&self) -> &StreamManifest {
        &self.manifest
    }
}

impl FrameSource for DirFrameSource {
    fn frame_rate(&self) -> f64 {
        self.manifest.frame_rate
    }

    fn len(&self) -> usize {
        self.files.len()
    }

    fn timestamp(&self, index: usize) -> Timestamp {
        let offset = match &self.manifest.frame_times {
            Some(times) => times[index],
            None => index as f64 / self.manifest.frame_rate,
        };
        offset_seconds(self.manifest.start_time, offset)
    }

    fn frame(&self, index: usize) -> Result<GrayFrame> {
        decode_frame(&self.files[index], self.timestamp(index))
    }
}

/// File name of frame `index` inside a frame directory.
pub fn frame_file_name(index: usize, extension: &str) -> String {
    format!("{index:06}.{extension}")
}

/// Validates a manifest and opens its frames for reading.
pub fn open_stream(manifest: &StreamManifest) -> Result<DirFrameSource> {
    manifest.validate()?;
    let count = manifest.frame_count();
    let mut files = Vec::with_capacity(count);
    for index in 0..count {
        let pgm = manifest.frames.join(frame_file_name(index, "pgm"));
        if pgm.is_file() {
            files.push(pgm);
            continue;
        }
        let png = manifest.frames.join(frame_file_name(index, "png"));
        if png.is_file() {
            files.push(png);
            continue;
        }
        return Err(Error::MissingFile(pgm));
    }
    if let Some(audio) = &manifest.audio_path {
        let audio_duration = wav_duration(audio)?;
        if (audio_duration - manifest.duration).abs() > AUDIO_DURATION_SLACK_S {
            return Err(Error::InvalidManifest(format!(
                "audio lasts {audio_duration:.3} s but stream declares {:.3} s",
                manifest.duration
            )));
        }
    }
    Ok(DirFrameSource {
        manifest: manifest.clone(),
        files,
    })
}

fn decode_frame(path: &Path, t: Timestamp) -> Result<GrayFrame> {
    let undecodable = |reason: String| Error::UndecodableFrame {
        path: path.to_path_buf(),
        reason,
    };
    let image = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| undecodable(e.to_string()))?;
    let (width, height) = (image.width() as usize, image.height() as usize);
    match image {
        image::DynamicImage::ImageLuma8(buf) => GrayFrame::from_gray8(width, height, t, buf.as_raw()),
        image::DynamicImage::ImageLuma16(buf) => {
            let pixels = buf.as_raw().iter().map(|&v| f64::from(v) / 65535.0).collect();
            GrayFrame::new(width, height, t, pixels)
        }
        other => GrayFrame::from_rgb8(width, height, t, other.to_rgb8().as_raw()),
    }
    .map_err(|e| undecodable(e.to_string()))
}

/// Emits one pair of adjacent frames at the start of every complete
/// `interval`; partial trailing intervals are dropped.
pub fn sample_pairs<S: FrameSource>(source: S, interval: f64) -> Result<PairSampler<S>> {
    let fps = source.frame_rate();
    if !(interval >= 2.0 / fps - 1e-12) {
        return Err(Error::InvalidConfig(format!(
            "pair interval {interval} s is shorter than two frames at {fps} fps"
        )));
    }
    let ticks = (source.duration() / interval + 1e-9).floor() as usize;
    Ok(PairSampler {
        source,
        interval,
        ticks,
        next_tick: 0,
    })
}

pub struct PairSampler<S: FrameSource> {
    source: S,
    interval: f64,
    ticks: usize,
    next_tick: usize,
}

impl<S: FrameSource> PairSampler<S> {
    /// Index of the first frame of the pair for `tick`, if the pair fits.
    fn pair_start(&self, tick: usize) -> Option<usize> {
        let index = (tick as f64 * self.interval * self.source.frame_rate()).round() as usize;
        (index + 1 < self.source.len()).then_some(index)
    }

    /// Timestamp of the next pair without decoding it.
    pub fn peek_time(&self) -> Option<Timestamp> {
        if self.next_tick >= self.ticks {
            return None;
        }
        self.pair_start(self.next_tick).map(|i| self.source.timestamp(i + 1))
    }

    /// Advances past the next pair without decoding it.
    pub fn skip_pair(&mut self) {
        self.next_tick += 1;
    }

    pub fn remaining(&self) -> usize {
        (self.next_tick..self.ticks)
            .filter(|&t| self.pair_start(t).is_some())
            .count()
    }
}

impl<S: FrameSource> Iterator for PairSampler<S> {
    type Item = Result<FramePair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_tick >= self.ticks {
            return None;
        }
        let start = self.pair_start(self.next_tick)?;
        self.next_tick += 1;
        let pair = self
            .source
            .frame(start)
            .and_then(|a| Ok((a, self.source.frame(start + 1)?)))
            .and_then(|(a, b)| FramePair::new(a, b));
        Some(pair)
    }
}

/// Exactly one second of mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    pub t_start: Timestamp,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioWindow {
    pub fn new(t_start: Timestamp, sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != sample_rate as usize {
            return Err(Error::DimensionMismatch(format!(
                "audio window holds {} samples at {} Hz",
                samples.len(),
                sample_rate
            )));
        }
        if samples.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::DimensionMismatch("audio sample outside [-1, 1]".into()));
        }
        Ok(AudioWindow {
            t_start,
            sample_rate,
            samples,
        })
    }
}

fn open_wav(path: &Path) -> Result<hound::WavReader<BufReader<File>>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| Error::CorruptAudio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedAudio("floating-point PCM".into()));
    }
    if spec.bits_per_sample != 8 && spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!("{}-bit PCM", spec.bits_per_sample)));
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedAudio(format!("{} channels", spec.channels)));
    }
    Ok(reader)
}

/// Duration of a WAV track in seconds.
pub fn wav_duration(path: &Path) -> Result<f64> {
    let reader = open_wav(path)?;
    Ok(f64::from(reader.duration()) / f64::from(reader.spec().sample_rate))
}

/// Splits a PCM WAV file into consecutive one-second mono windows.
pub fn audio_windows(path: impl AsRef<Path>, start_time: Timestamp) -> Result<AudioWindows> {
    let path = path.as_ref();
    let reader = open_wav(path)?;
    let spec = reader.spec();
    let scale = if spec.bits_per_sample == 8 { 128.0 } else { 32768.0 };
    Ok(AudioWindows {
        path: path.to_path_buf(),
        samples: reader.into_samples::<i16>(),
        sample_rate: spec.sample_rate,
        channels: usize::from(spec.channels),
        scale,
        start_time,
        emitted: 0,
        failed: false,
    })
}

pub struct AudioWindows {
    path: PathBuf,
    samples: hound::WavIntoSamples<BufReader<File>, i16>,
    sample_rate: u32,
    channels: usize,
    scale: f64,
    start_time: Timestamp,
    emitted: usize,
    failed: bool,
}

impl std::fmt::Debug for AudioWindows {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AudioWindows")
            .field("path", &self.path)
            .field("sample_rate", &self.sample_rate)
            .field("channels", &self.channels)
            .field("emitted", &self.emitted)
            .finish_non_exhaustive()
    }
}

impl AudioWindows {
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

impl Iterator for AudioWindows {
    type Item = Result<AudioWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let n = self.sample_rate as usize;
        let mut mono = Vec::with_capacity(n);
        let mut frame_sum = 0.0;
        let mut in_frame = 0;
        for sample in self.samples.by_ref() {
            let value = match sample {
                Ok(v) => f64::from(v) / self.scale,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::CorruptAudio {
                        path: self.path.clone(),
                        reason: e.to_string(),
                    }));
                }
            };
            frame_sum += value;
            in_frame += 1;
            if in_frame == self.channels {
                mono.push((frame_sum / self.channels as f64).clamp(-1.0, 1.0));
                frame_sum = 0.0;
                in_frame = 0;
                if mono.len() == n {
                    break;
                }
            }
        }
        if mono.len() < n {
            return None;
        }
        let t_start = offset_seconds(self.start_time, self.emitted as f64);
        self.emitted += 1;
        Some(AudioWindow::new(t_start, self.sample_rate, mono))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2023, 9, 18, 10, 0, 0).unwrap()
    }

    fn write_pgm(path: &Path, width: u32, height: u32, value: u8) {
        let buf = image::GrayImage::from_pixel(width, height, image::Luma([value]));
        buf.save_with_format(path, image::ImageFormat::Pnm).unwrap();
    }

    fn manifest(dir: &Path, fps: f64, duration: f64) -> StreamManifest {
        StreamManifest {
            video_id: "cam".into(),
            frames: dir.to_path_buf(),
            frame_rate: fps,
            start_time: t0(),
            audio_path: None,
            duration,
            frame_times: None,
        }
    }

    fn write_wav(path: &Path, channels: u16, bits: u16, rate: u32, frames: &[Vec<i16>]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in frame {
                if bits == 8 {
                    w.write_sample(s as i8).unwrap();
                } else {
                    w.write_sample(s).unwrap();
                }
            }
        }
        w.finalize().unwrap();
    }

    struct Synthetic {
        len: usize,
        fps: f64,
    }

    impl FrameSource for Synthetic {
        fn frame_rate(&self) -> f64 {
            self.fps
        }
        fn len(&self) -> usize {
            self.len
        }
        fn timestamp(&self, index: usize) -> Timestamp {
            offset_seconds(t0(), index as f64 / self.fps)
        }
        fn frame(&self, index: usize) -> Result<GrayFrame> {
            GrayFrame::new(1, 1, self.timestamp(index), vec![(index % 7) as f64 / 7.0])
        }
    }

    #[test]
    fn thirty_minutes_at_thirty_fps_yields_54000_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("proto.pgm"), 1, 1, 0);
        let proto = std::fs::read(dir.path().join("proto.pgm")).unwrap();
        for i in 0..54_000 {
            std::fs::write(dir.path().join(frame_file_name(i, "pgm")), &proto).unwrap();
        }
        let source = open_stream(&manifest(dir.path(), 30.0, 1800.0)).unwrap();
        assert_eq!(source.len(), 54_000);
        assert_eq!(source.frames().take(3).count(), 3);
    }

    #[test]
    fn zero_duration_is_an_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let err = open_stream(&manifest(dir.path(), 30.0, 0.0)).unwrap_err();
        assert_eq!(err.to_string(), "empty stream");
    }

    #[test]
    fn missing_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join(frame_file_name(0, "pgm")), 2, 2, 9);
        let err = open_stream(&manifest(dir.path(), 1.0, 2.0)).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn undecodable_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(frame_file_name(0, "pgm")), b"P5 garbage").unwrap();
        let source = open_stream(&manifest(dir.path(), 1.0, 1.0)).unwrap();
        assert!(matches!(source.frame(0).unwrap_err(), Error::UndecodableFrame { .. }));
    }

    #[test]
    fn non_monotonic_frame_times_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(dir.path(), 1.0, 3.0);
        m.frame_times = Some(vec![0.0, 1.0, 1.0]);
        assert!(matches!(
            open_stream(&m).unwrap_err(),
            Error::NonMonotonicTimestamps { index: 2 }
        ));
    }

    #[test]
    fn eight_bit_gray_is_scaled_into_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join(frame_file_name(0, "pgm")), 3, 2, 51);
        let source = open_stream(&manifest(dir.path(), 1.0, 1.0)).unwrap();
        let frame = source.frame(0).unwrap();
        assert_eq!((frame.width(), frame.height()), (3, 2));
        assert!(frame.pixels().iter().all(|&p| p == 51.0 / 255.0));
    }

    #[test]
    fn rgb_png_uses_luma_weights() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(2, 1, image::Rgb([255, 0, 0]));
        img.save(dir.path().join(frame_file_name(0, "png"))).unwrap();
        let source = open_stream(&manifest(dir.path(), 1.0, 1.0)).unwrap();
        let frame = source.frame(0).unwrap();
        assert!((frame.pixels()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn sixty_seconds_at_interval_five_gives_twelve_pairs() {
        let source = Synthetic { len: 1800, fps: 30.0 };
        let pairs: Vec<_> = sample_pairs(&source, 5.0).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(pairs.len(), 12);
        for w in pairs.windows(2) {
            let gap = seconds_between(w[0].t(), w[1].t());
            assert!((gap - 5.0).abs() <= 1.0 / 30.0 + 1e-9);
            assert!(w[0].b.t() < w[1].a.t());
        }
    }

    #[test]
    fn short_stream_gives_no_pairs() {
        let source = Synthetic { len: 120, fps: 30.0 };
        assert_eq!(sample_pairs(&source, 5.0).unwrap().count(), 0);
    }

    #[test]
    fn thirty_minutes_gives_360_pairs() {
        let source = Synthetic { len: 54_000, fps: 30.0 };
        let sampler = sample_pairs(&source, 5.0).unwrap();
        assert_eq!(sampler.remaining(), 360);
    }

    #[test]
    fn low_frame_rate_uses_every_frame_once() {
        let source = Synthetic { len: 48, fps: 0.4 };
        let pairs: Vec<_> = sample_pairs(&source, 5.0).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(pairs.len(), 24);
        assert_eq!(pairs[1].a.t(), source.timestamp(2));
    }

    #[test]
    fn interval_shorter_than_two_frames_rejected() {
        let source = Synthetic { len: 100, fps: 1.0 };
        assert!(sample_pairs(&source, 1.5).is_err());
    }

    #[test]
    fn audio_track_splits_into_whole_seconds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let frames: Vec<Vec<i16>> = (0..654).map(|_| vec![100]).collect();
        write_wav(&path, 1, 16, 10, &frames);
        let windows: Vec<_> = audio_windows(&path, t0()).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(windows.len(), 65);
        assert_eq!(windows[64].t_start, offset_seconds(t0(), 64.0));
        assert_eq!(windows[0].samples.len(), 10);
    }

    #[test]
    fn full_scale_16_bit_maps_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let frames: Vec<Vec<i16>> = (0..8)
            .map(|i| vec![if i % 2 == 0 { i16::MIN } else { i16::MAX }])
            .collect();
        write_wav(&path, 1, 16, 8, &frames);
        let w = audio_windows(&path, t0()).unwrap().next().unwrap().unwrap();
        assert_eq!(w.samples[0], -1.0);
        assert!((w.samples[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn stereo_is_averaged_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let l = (0.2 * 32768.0) as i16;
        let r = (0.4 * 32768.0) as i16;
        let frames: Vec<Vec<i16>> = (0..16).map(|_| vec![l, r]).collect();
        write_wav(&path, 2, 16, 16, &frames);
        let w = audio_windows(&path, t0()).unwrap().next().unwrap().unwrap();
        assert!(w.samples.iter().all(|&s| (s - 0.3).abs() < 1e-4));
    }

    #[test]
    fn eight_bit_pcm_is_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let frames: Vec<Vec<i16>> = (0..4).map(|_| vec![64]).collect();
        write_wav(&path, 1, 8, 4, &frames);
        let w = audio_windows(&path, t0()).unwrap().next().unwrap().unwrap();
        assert!(w.samples.iter().all(|&s| (s - 0.5).abs() < 1e-12));
    }

    #[test]
    fn float_wav_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 4,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            audio_windows(&path, t0()).unwrap_err(),
            Error::UnsupportedAudio(_)
        ));
    }

    #[test]
    fn corrupt_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        std::fs::write(&path, b"RIFF\x00\x00junk").unwrap();
        assert!(matches!(
            audio_windows(&path, t0()).unwrap_err(),
            Error::CorruptAudio { .. }
        ));
    }

    #[test]
    fn audio_length_must_match_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join(frame_file_name(0, "pgm")), 1, 1, 0);
        let wav = dir.path().join("a.wav");
        let frames: Vec<Vec<i16>> = (0..40).map(|_| vec![0]).collect();
        write_wav(&wav, 1, 16, 10, &frames);
        let mut m = manifest(dir.path(), 1.0, 1.0);
        m.audio_path = Some(wav);
        assert!(matches!(open_stream(&m).unwrap_err(), Error::InvalidManifest(_)));
    }

    #[test]
    fn manifest_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = StreamManifest {
            video_id: "v".into(),
            frames: "frames".into(),
            frame_rate: 1.0,
            start_time: t0(),
            audio_path: Some("audio.wav".into()),
            duration: 1.0,
            frame_times: None,
        };
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let loaded = StreamManifest::load(&path).unwrap();
        assert_eq!(loaded.frames, dir.path().join("frames"));
        assert_eq!(loaded.audio_path.unwrap(), dir.path().join("audio.wav"));
    }

    #[test]
    fn rereading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_pgm(&dir.path().join(frame_file_name(i, "pgm")), 4, 3, (i * 40) as u8);
        }
        let m = manifest(dir.path(), 1.0, 4.0);
        let a: Vec<_> = open_stream(&m).unwrap().frames().map(|f| f.unwrap()).collect();
        let b: Vec<_> = open_stream(&m).unwrap().frames().map(|f| f.unwrap()).collect();
        assert_eq!(a, b);
    }
}
