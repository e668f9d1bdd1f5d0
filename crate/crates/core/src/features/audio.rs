use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::ingest::AudioWindow;

/// Share of spectral energy below the rolloff frequency.
pub const ROLLOFF_FRACTION: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AudioFeatures {
    /// Peak absolute amplitude.
    pub ae: f64,
    pub rmse: f64,
    /// Sign changes per sample step.
    pub zcr: f64,
    /// Spectral centroid, Hz.
    pub sc: f64,
    /// Spectral rolloff, Hz.
    pub sr: f64,
}

impl AudioFeatures {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ae, self.rmse, self.zcr, self.sc, self.sr]
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// One-sided magnitude spectrum, bins `0..=n/2`.
fn magnitude_spectrum(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n));
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    fft.process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}

pub fn audio_features(window: &AudioWindow) -> AudioFeatures {
    let x = &window.samples;
    let n = x.len();
    if n == 0 {
        return AudioFeatures::default();
    }
    let ae = x.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if ae == 0.0 {
        return AudioFeatures::default();
    }
    let rmse = (x.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    let crossings = x.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
    let zcr = if n > 1 { crossings as f64 / (n - 1) as f64 } else { 0.0 };

    let mags = magnitude_spectrum(x);
    let bin_hz = f64::from(window.sample_rate) / n as f64;
    let mag_sum: f64 = mags.iter().sum();
    let sc = if mag_sum > 0.0 {
        mags.iter().enumerate().map(|(k, m)| k as f64 * bin_hz * m).sum::<f64>() / mag_sum
    } else {
        0.0
    };
    let energy: f64 = mags.iter().map(|m| m * m).sum();
    let sr = if energy > 0.0 {
        let target = ROLLOFF_FRACTION * energy;
        let mut cumulative = 0.0;
        let mut bin = mags.len() - 1;
        for (k, m) in mags.iter().enumerate() {
            cumulative += m * m;
            if cumulative >= target {
                bin = k;
                break;
            }
        }
        bin as f64 * bin_hz
    } else {
        0.0
    };

    AudioFeatures { ae, rmse, zcr, sc, sr }
}
