//! Region-of-interest discovery from user-declared rain periods.
//!
//! Intensity-change maps sampled inside the hinted periods are averaged per
//! light class, the two class means are averaged into a composite map, weak
//! pixels are dropped, the survivors are clustered with weighted k-means, and
//! each cluster becomes a percentile bounding box.

mod kmeans;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{sample_pairs, FrameSource, Timestamp, DEFAULT_PAIR_INTERVAL_S};
use crate::motion::{delta_map, DeltaMap, MeanAccumulator};

pub use kmeans::{weighted_kmeans, weighted_kmeans_restarts, Clustering, WeightedPoint, MAX_ITERATIONS};

pub const ROISET_VERSION: u32 = 1;
pub const MAX_ROIS: usize = 8;
pub const DEFAULT_TAU_WEAK: f64 = 0.15;
pub const DEFAULT_P_LO: f64 = 10.0;
pub const DEFAULT_P_HI: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightClass {
    Day,
    Night,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainPeriodHint {
    pub start: Timestamp,
    pub end: Timestamp,
    pub light_class: LightClass,
}

impl RainPeriodHint {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t <= self.end
    }
}

pub fn load_hints(path: impl AsRef<Path>) -> Result<Vec<RainPeriodHint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let hints: Vec<RainPeriodHint> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    for hint in &hints {
        if hint.start >= hint.end {
            return Err(Error::InvalidConfig(format!(
                "rain hint starting {} does not end after it starts",
                hint.start
            )));
        }
    }
    Ok(hints)
}

/// Axis-aligned box, inclusive lower and exclusive upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub id: u32,
    pub x_lo: usize,
    pub y_lo: usize,
    pub x_hi: usize,
    pub y_hi: usize,
}

impl Roi {
    pub fn width(&self) -> usize {
        self.x_hi - self.x_lo
    }

    pub fn height(&self) -> usize {
        self.y_hi - self.y_lo
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_lo..self.x_hi).contains(&x) && (self.y_lo..self.y_hi).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_lo < self.x_hi && self.x_hi <= width && self.y_lo < self.y_hi && self.y_hi <= height
    }

    pub fn iou(&self, other: &Roi) -> f64 {
        let ix = self.x_hi.min(other.x_hi).saturating_sub(self.x_lo.max(other.x_lo));
        let iy = self.y_hi.min(other.y_hi).saturating_sub(self.y_lo.max(other.y_lo));
        let inter = (ix * iy) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSet {
    pub version: u32,
    pub k: usize,
    pub rois: Vec<Roi>,
    /// SHA-256 over the hints and the composite map they produced.
    pub source_hash: String,
}

impl RoiSet {
    pub fn new(rois: Vec<Roi>, source_hash: String) -> Result<Self> {
        let set = RoiSet {
            version: ROISET_VERSION,
            k: rois.len(),
            rois,
            source_hash,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ROISET_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported RoI set version {}",
                self.version
            )));
        }
        if self.k != self.rois.len() || self.k == 0 || self.k > MAX_ROIS {
            return Err(Error::InvalidConfig(format!(
                "RoI set must hold 1..={MAX_ROIS} regions matching k, got k={} with {}",
                self.k,
                self.rois.len()
            )));
        }
        if self.rois.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::InvalidConfig("RoIs must be ordered by id".into()));
        }
        if self.rois.iter().any(|r| r.x_lo >= r.x_hi || r.y_lo >= r.y_hi) {
            return Err(Error::InvalidConfig("RoI with empty extent".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        match self.rois.iter().find(|r| !r.fits(width, height)) {
            Some(r) => Err(Error::DimensionMismatch(format!(
                "RoI {} does not fit a {width}x{height} frame",
                r.id
            ))),
            None => Ok(()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: RoiSet = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("RoI set", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoRoiConfig {
    pub tau_weak: f64,
    pub pair_interval: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    /// Seeded k-means runs; the lowest objective wins.
    pub restarts: usize,
}

impl Default for AutoRoiConfig {
    fn default() -> Self {
        AutoRoiConfig {
            tau_weak: DEFAULT_TAU_WEAK,
            pair_interval: DEFAULT_PAIR_INTERVAL_S,
            p_lo: DEFAULT_P_LO,
            p_hi: DEFAULT_P_HI,
            restarts: 10,
        }
    }
}

/// Averages day and night class means with equal weight; a class with no
/// contributing pairs is left out.
pub fn combine_class_means(day: Option<&DeltaMap>, night: Option<&DeltaMap>) -> Result<DeltaMap> {
    match (day, night) {
        (Some(d), Some(n)) => crate::motion::mean_map([d, n]),
        (Some(m), None) | (None, Some(m)) => Ok(m.clone()),
        (None, None) => Err(Error::NoHintOverlap),
    }
}

pub fn composite_map<S: FrameSource>(hints: &[RainPeriodHint], sources: &[S], pair_interval: f64) -> Result<DeltaMap> {
    let mut day = MeanAccumulator::new();
    let mut night = MeanAccumulator::new();
    for source in sources {
        let mut pairs = sample_pairs(source, pair_interval)?;
        while let Some(t) = pairs.peek_time() {
            let class = hints.iter().find(|h| h.contains(t)).map(|h| h.light_class);
            let Some(class) = class else {
                pairs.skip_pair();
                continue;
            };
            let pair = pairs.next().expect("peeked pair exists")?;
            let map = delta_map(&pair)?;
            match class {
                LightClass::Day => day.add(&map)?,
                LightClass::Night => night.add(&map)?,
            }
        }
    }
    log::debug!(
        "composite map from {} day and {} night pairs",
        day.count(),
        night.count()
    );
    let day = (day.count() > 0).then(|| day.finish()).transpose()?;
    let night = (night.count() > 0).then(|| night.finish()).transpose()?;
    combine_class_means(day.as_ref(), night.as_ref())
}

/// Keeps pixels with value `>= tau_weak`, weighted by that value.
pub fn filter_weak(map: &DeltaMap, tau_weak: f64) -> Result<Vec<WeightedPoint>> {
    let points: Vec<WeightedPoint> = map
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= tau_weak && v > 0.0)
        .map(|(i, &v)| WeightedPoint {
            x: i % map.width(),
            y: i / map.width(),
            w: v,
        })
        .collect();
    if points.is_empty() {
        return Err(Error::NoStrongReflections);
    }
    Ok(points)
}

/// Nearest-rank percentile of an ascending slice.
fn nearest_rank(sorted: &[usize], p: f64) -> usize {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Box spanning the `p_lo`..`p_hi` nearest-rank percentiles of the member
/// coordinates on each axis, both percentile pixels included.
pub fn cluster_bbox<'a, I>(points: I, p_lo: f64, p_hi: f64) -> Result<Roi>
where
    I: IntoIterator<Item = &'a WeightedPoint>,
{
    let (mut xs, mut ys): (Vec<usize>, Vec<usize>) = points.into_iter().map(|p| (p.x, p.y)).unzip();
    if xs.is_empty() {
        return Err(Error::EmptyInput("bounding box of an empty cluster"));
    }
    xs.sort_unstable();
    ys.sort_unstable();
    let x_lo = nearest_rank(&xs, p_lo);
    let y_lo = nearest_rank(&ys, p_lo);
    let x_hi = (nearest_rank(&xs, p_hi) + 1).max(x_lo + 1);
    let y_hi = (nearest_rank(&ys, p_hi) + 1).max(y_lo + 1);
    Ok(Roi {
        id: 0,
        x_lo,
        y_lo,
        x_hi,
        y_hi,
    })
}

fn source_hash(hints: &[RainPeriodHint], composite: &DeltaMap) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(hints).expect("hints serialize"));
    hasher.update((composite.width() as u64).to_le_bytes());
    hasher.update((composite.height() as u64).to_le_bytes());
    for v in composite.values() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Clusters an already-built composite map into `k` regions.
pub fn rois_from_composite(composite: &DeltaMap, k: usize, seed: u64, cfg: &AutoRoiConfig) -> Result<Vec<Roi>> {
    if k == 0 || k > MAX_ROIS {
        return Err(Error::InvalidConfig(format!("k must be in 1..={MAX_ROIS}, got {k}")));
    }
    let points = filter_weak(composite, cfg.tau_weak)?;
    let clustering = weighted_kmeans_restarts(&points, k, seed, cfg.restarts)?;

    let mut clusters: Vec<(f64, Roi)> = Vec::with_capacity(k);
    for cluster in 0..k {
        let members: Vec<&WeightedPoint> = clustering.members(&points, cluster).collect();
        if members.is_empty() {
            continue;
        }
        let weight: f64 = members.iter().map(|p| p.w).sum();
        clusters.push((weight, cluster_bbox(members, cfg.p_lo, cfg.p_hi)?));
    }
    clusters.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(i, (_, roi))| Roi {
            id: i as u32 + 1,
            ..roi
        })
        .collect())
}

pub fn auto_roi<S: FrameSource>(
    hints: &[RainPeriodHint],
    sources: &[S],
    k: usize,
    seed: u64,
    cfg: &AutoRoiConfig,
) -> Result<RoiSet> {
    let composite = composite_map(hints, sources, cfg.pair_interval)?;
    let rois = rois_from_composite(&composite, k, seed, cfg)?;
    if rois.len() < k {
        log::warn!("k-means left {} of {k} clusters empty", k - rois.len());
    }
    RoiSet::new(rois, source_hash(hints, &composite))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{offset_seconds, GrayFrame};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2023, 6, 1, 12, 0, 0).unwrap()
    }

    fn map_of(width: usize, values: Vec<f64>) -> DeltaMap {
        DeltaMap::new(width, values.len() / width, t0(), values).unwrap()
    }

    /// Frames alternate between a dark background and one with a bright
    /// square switched on, so every adjacent pair lights up the square.
    struct Blinking {
        len: usize,
        square: Roi,
        level: f64,
    }

    impl FrameSource for Blinking {
        fn frame_rate(&self) -> f64 {
            1.0
        }
        fn len(&self) -> usize {
            self.len
        }
        fn timestamp(&self, index: usize) -> Timestamp {
            offset_seconds(t0(), index as f64)
        }
        fn frame(&self, index: usize) -> Result<GrayFrame> {
            let (w, h) = (32, 24);
            let mut px = vec![0.1; w * h];
            if index % 2 == 1 {
                for y in 0..h {
                    for x in 0..w {
                        if self.square.contains(x, y) {
                            px[y * w + x] = 0.1 + self.level;
                        }
                    }
                }
            }
            GrayFrame::new(w, h, self.timestamp(index), px)
        }
    }

    fn hint(from: f64, to: f64, light_class: LightClass) -> RainPeriodHint {
        RainPeriodHint {
            start: offset_seconds(t0(), from),
            end: offset_seconds(t0(), to),
            light_class,
        }
    }

    #[test]
    fn class_means_are_averaged_with_equal_weight() {
        let day = map_of(1, vec![0.4]);
        let night = map_of(1, vec![0.2]);
        let c = combine_class_means(Some(&day), Some(&night)).unwrap();
        assert!((c.values()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn missing_class_returns_the_other_mean() {
        let day = map_of(1, vec![0.4]);
        assert_eq!(combine_class_means(Some(&day), None).unwrap(), day);
        assert!(matches!(combine_class_means(None, None), Err(Error::NoHintOverlap)));
    }

    #[test]
    fn composite_peaks_inside_the_blinking_square() {
        let square = Roi {
            id: 0,
            x_lo: 5,
            y_lo: 4,
            x_hi: 12,
            y_hi: 10,
        };
        let source = Blinking {
            len: 60,
            square,
            level: 0.6,
        };
        let hints = [hint(0.0, 30.0, LightClass::Day)];
        let c = composite_map(&hints, &[&source], 5.0).unwrap();
        let (argmax, _) = c
            .values()
            .iter()
            .enumerate()
            .fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        assert!(square.contains(argmax % 32, argmax / 32));
    }

    #[test]
    fn hints_outside_the_stream_are_an_error() {
        let source = Blinking {
            len: 20,
            square: Roi {
                id: 0,
                x_lo: 0,
                y_lo: 0,
                x_hi: 2,
                y_hi: 2,
            },
            level: 0.5,
        };
        let hints = [hint(1000.0, 2000.0, LightClass::Night)];
        assert!(matches!(
            composite_map(&hints, &[&source], 5.0),
            Err(Error::NoHintOverlap)
        ));
    }

    #[test]
    fn weak_filter_on_zero_map_is_an_error() {
        let err = filter_weak(&map_of(2, vec![0.0; 4]), 0.15).unwrap_err();
        assert_eq!(err.to_string(), "no strong reflections; provide more/longer rain hints");
    }

    #[test]
    fn weak_filter_keeps_the_threshold_value() {
        let pts = filter_weak(&map_of(3, vec![0.1, 0.15, 0.9]), 0.15).unwrap();
        assert_eq!(
            pts,
            vec![
                WeightedPoint { x: 1, y: 0, w: 0.15 },
                WeightedPoint { x: 2, y: 0, w: 0.9 }
            ]
        );
    }

    #[test]
    fn weak_filter_keeps_uniform_map() {
        let pts = filter_weak(&map_of(2, vec![0.5; 6]), 0.15).unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.w == 0.5));
    }

    #[test]
    fn bbox_uses_nearest_rank_percentiles() {
        let pts: Vec<_> = (0..10).map(|x| WeightedPoint { x, y: 3, w: 1.0 }).collect();
        let roi = cluster_bbox(&pts, 10.0, 90.0).unwrap();
        assert_eq!((roi.x_lo, roi.x_hi), (0, 9));
        assert_eq!((roi.y_lo, roi.y_hi), (3, 4));
    }

    #[test]
    fn identical_points_give_unit_box() {
        let pts = vec![WeightedPoint { x: 7, y: 2, w: 0.4 }; 5];
        let roi = cluster_bbox(&pts, 10.0, 90.0).unwrap();
        assert_eq!((roi.x_lo, roi.y_lo, roi.x_hi, roi.y_hi), (7, 2, 8, 3));
    }

    #[test]
    fn square_blob_box_spans_eighty_percent() {
        let mut pts = Vec::new();
        for y in 0..20 {
            for x in 0..20 {
                pts.push(WeightedPoint {
                    x: x + 10,
                    y: y + 30,
                    w: 1.0,
                });
            }
        }
        let roi = cluster_bbox(&pts, 10.0, 90.0).unwrap();
        // ranks ceil(0.1*400)=40 and ceil(0.9*400)=360 in the sorted lists
        assert_eq!((roi.x_lo, roi.x_hi), (11, 28));
        assert_eq!((roi.y_lo, roi.y_hi), (31, 48));
        assert!((roi.width() as f64 / 20.0 - 0.85).abs() < 0.051);
    }

    #[test]
    fn auto_roi_with_one_cluster() {
        let source = Blinking {
            len: 40,
            square: Roi {
                id: 0,
                x_lo: 3,
                y_lo: 3,
                x_hi: 9,
                y_hi: 8,
            },
            level: 0.5,
        };
        let set = auto_roi(
            &[hint(0.0, 40.0, LightClass::Day)],
            &[&source],
            1,
            7,
            &AutoRoiConfig::default(),
        )
        .unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.rois[0].id, 1);
        assert!(set.rois[0].iou(&source.square) >= 0.5);
    }

    #[test]
    fn auto_roi_is_deterministic_and_persists() {
        let source = Blinking {
            len: 40,
            square: Roi {
                id: 0,
                x_lo: 3,
                y_lo: 3,
                x_hi: 20,
                y_hi: 18,
            },
            level: 0.5,
        };
        let hints = [hint(0.0, 40.0, LightClass::Night)];
        let cfg = AutoRoiConfig::default();
        let a = auto_roi(&hints, &[&source], 3, 7, &cfg).unwrap();
        let b = auto_roi(&hints, &[&source], 3, 7, &cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path().join("r.json")).unwrap();
        b.save(dir.path().join("s.json")).unwrap();
        let ra = std::fs::read(dir.path().join("r.json")).unwrap();
        assert_eq!(ra, std::fs::read(dir.path().join("s.json")).unwrap());
        assert_eq!(RoiSet::load(dir.path().join("r.json")).unwrap(), a);
        assert!(a.rois.iter().all(|r| r.fits(32, 24)));
    }

    #[test]
    fn roiset_rejects_bad_k() {
        assert!(RoiSet::new(vec![], String::new()).is_err());
        let r = Roi {
            id: 1,
            x_lo: 0,
            y_lo: 0,
            x_hi: 1,
            y_hi: 1,
        };
        let many: Vec<_> = (1..=9).map(|id| Roi { id, ..r }).collect();
        assert!(RoiSet::new(many, String::new()).is_err());
    }

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let r = Roi {
            id: 1,
            x_lo: 2,
            y_lo: 2,
            x_hi: 6,
            y_hi: 5,
        };
        assert_eq!(r.iou(&r), 1.0);
        let s = Roi { x_lo: 4, x_hi: 8, ..r };
        assert!((r.iou(&s) - 6.0 / 18.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn box_holds_eighty_percent_per_axis(
            raw in prop::collection::vec((0usize..64, 0usize..48), 1..200),
        ) {
            let pts: Vec<_> = raw.iter().map(|&(x, y)| WeightedPoint { x, y, w: 1.0 }).collect();
            let roi = cluster_bbox(&pts, 10.0, 90.0).unwrap();
            let n = pts.len() as f64;
            let in_x = pts.iter().filter(|p| (roi.x_lo..roi.x_hi).contains(&p.x)).count() as f64;
            let in_y = pts.iter().filter(|p| (roi.y_lo..roi.y_hi).contains(&p.y)).count() as f64;
            prop_assert!(in_x >= 0.8 * n - 1e-9);
            prop_assert!(in_y >= 0.8 * n - 1e-9);
            prop_assert!(roi.fits(64, 48));
        }
    }
}
