//! Per-pixel intensity-change maps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{FramePair, Timestamp};

/// Absolute luminance change between two frames, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMap {
    width: usize,
    height: usize,
    t: Timestamp,
    values: Vec<f64>,
}

impl DeltaMap {
    pub fn new(width: usize, height: usize, t: Timestamp, values: Vec<f64>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} map with {} values",
                width,
                height,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DimensionMismatch("delta value outside [0, 1]".into()));
        }
        Ok(DeltaMap {
            width,
            height,
            t,
            values,
        })
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Debug dump as an 8-bit binary PGM.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(self.values.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("in-memory write");
        out.extend(self.values.iter().map(|v| (v * 255.0).round() as u8));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn delta_map(pair: &FramePair) -> Result<DeltaMap> {
    let (a, b) = (&pair.a, &pair.b);
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let values = a.pixels().iter().zip(b.pixels()).map(|(p, q)| (q - p).abs()).collect();
    Ok(DeltaMap {
        width: a.width(),
        height: a.height(),
        t: pair.t(),
        values,
    })
}

/// Streaming pixelwise mean, for averaging many maps without holding them.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    width: usize,
    height: usize,
    t: Option<Timestamp>,
    sums: Vec<f64>,
    count: usize,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        MeanAccumulator {
            width: 0,
            height: 0,
            t: None,
            sums: Vec::new(),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, map: &DeltaMap) -> Result<()> {
        if self.count == 0 {
            self.width = map.width;
            self.height = map.height;
            self.sums = vec![0.0; map.values.len()];
        } else if (self.width, self.height) != (map.width, map.height) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} map averaged with {}x{}",
                map.width, map.height, self.width, self.height
            )));
        }
        for (s, v) in self.sums.iter_mut().zip(&map.values) {
            *s += v;
        }
        self.t = Some(self.t.map_or(map.t, |t| t.max(map.t)));
        self.count += 1;
        Ok(())
    }

    /// The mean map, stamped with the latest input time.
    pub fn finish(&self) -> Result<DeltaMap> {
        let t = self.t.ok_or(Error::EmptyInput("mean of zero delta maps"))?;
        let n = self.count as f64;
        let values = self.sums.iter().map(|s| (s / n).clamp(0.0, 1.0)).collect();
        Ok(DeltaMap {
            width: self.width,
            height: self.height,
            t,
            values,
        })
    }
}

impl Default for MeanAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

pub fn mean_map<'a, I>(maps: I) -> Result<DeltaMap>
where
    I: IntoIterator<Item = &'a DeltaMap>,
{
    let mut acc = MeanAccumulator::new();
    for map in maps {
        acc.add(map)?;
    }
    acc.finish()
}
