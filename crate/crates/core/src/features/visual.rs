use crate::autoroi::{Roi, RoiSet};
use crate::error::Result;
use crate::ingest::FramePair;
use crate::motion::{delta_map, DeltaMap};

/// "High" change threshold: three gray levels on the 8-bit scale.
pub const DEFAULT_TAU_HIGH: f64 = 3.0 / 255.0;
pub const DEFAULT_TAU_BRIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tau_high: f64,
    pub tau_bright: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_high: DEFAULT_TAU_HIGH,
            tau_bright: DEFAULT_TAU_BRIGHT,
        }
    }
}

fn roi_values<'a>(map: &'a DeltaMap, roi: &'a Roi) -> impl Iterator<Item = f64> + 'a {
    let width = map.width();
    (roi.y_lo..roi.y_hi).flat_map(move |y| map.values()[y * width + roi.x_lo..y * width + roi.x_hi].iter().copied())
}

pub fn max_delta(map: &DeltaMap, roi: &Roi) -> f64 {
    roi_values(map, roi).fold(0.0, f64::max)
}

fn fraction_above(map: &DeltaMap, roi: &Roi, tau: f64) -> f64 {
    let hits = roi_values(map, roi).filter(|&v| v > tau).count();
    hits as f64 / roi.area() as f64
}

/// Fraction of pixels whose change strictly exceeds `tau_high`.
pub fn brightness(map: &DeltaMap, roi: &Roi, tau_high: f64) -> f64 {
    fraction_above(map, roi, tau_high)
}

/// Fraction of pixels whose change strictly exceeds `tau_bright`.
pub fn density(map: &DeltaMap, roi: &Roi, tau_bright: f64) -> f64 {
    fraction_above(map, roi, tau_bright)
}

/// 8-bit change level of a normalized value. The small bias absorbs the
/// rounding of `k/255 * 255` just below `k`.
pub(crate) fn level(v: f64) -> usize {
    ((v * 255.0 + 1e-9).floor() as usize).min(255)
}

/// Number of distinct integer change levels (0..=255) inside the region.
pub fn variability(map: &DeltaMap, roi: &Roi) -> u32 {
    let mut seen = [false; 256];
    for v in roi_values(map, roi) {
        seen[level(v)] = true;
    }
    seen.iter().filter(|&&s| s).count() as u32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiFeatures {
    pub max_delta: f64,
    pub brightness: f64,
    pub density: f64,
    pub variability: u32,
}

impl RoiFeatures {
    pub fn as_array(&self) -> [f64; 4] {
        [
            self.max_delta,
            self.brightness,
            self.density,
            f64::from(self.variability),
        ]
    }
}

/// Four features per region, regions in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub per_roi: Vec<RoiFeatures>,
}

impl VisualFeatures {
    /// Flattened as (max, brightness, density, variability) per region.
    pub fn to_vec(&self) -> Vec<f64> {
        self.per_roi.iter().flat_map(|f| f.as_array()).collect()
    }
}

pub fn visual_vector_from_map(map: &DeltaMap, rois: &RoiSet, th: &Thresholds) -> Result<VisualFeatures> {
    rois.check_bounds(map.width(), map.height())?;
    let per_roi = rois
        .rois
        .iter()
        .map(|roi| RoiFeatures {
            max_delta: max_delta(map, roi),
            brightness: brightness(map, roi, th.tau_high),
            density: density(map, roi, th.tau_bright),
            variability: variability(map, roi),
        })
        .collect();
    Ok(VisualFeatures { per_roi })
}

pub fn visual_vector(pair: &FramePair, rois: &RoiSet, th: &Thresholds) -> Result<VisualFeatures> {
    visual_vector_from_map(&delta_map(pair)?, rois, th)
}
