//! Reflection-based visual features, timbral audio features, and their
//! per-minute aggregation into model input rows.

mod audio;
mod minute;
mod visual;

pub use audio::{audio_features, AudioFeatures, ROLLOFF_FRACTION};
pub use minute::{
    feature_names, minute_aggregate, read_feature_csv, truncate_to_minute, write_feature_csv, MinuteFeature,
    FEATURE_SCHEMA_VERSION,
};
pub(crate) use minute::{format_time, parse_time};
pub use visual::{
    brightness, density, max_delta, variability, visual_vector, visual_vector_from_map, RoiFeatures, Thresholds,
    VisualFeatures, DEFAULT_TAU_BRIGHT, DEFAULT_TAU_HIGH,
};

/// Visual features per region, in layout order.
pub const VISUAL_PER_ROI: usize = 4;
pub const AUDIO_LEN: usize = 5;

/// Length of a concatenated minute row for `rois` regions.
pub fn row_len(rois: usize) -> usize {
    VISUAL_PER_ROI * rois + AUDIO_LEN
}
