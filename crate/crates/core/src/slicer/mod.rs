//! Audio ingestion: waveforms, log-mel spectrograms, robust denoising,
//! wavelet peak finding, and slice extraction.
//!
//! The pipeline turns a recording into a handful of fixed-length windows
//! centred on high-signal peaks: pad short recordings, compute a log-mel
//! spectrogram, denoise it channel-wise with robust statistics, sum the
//! channels into a signal vector, find peaks with a Ricker-wavelet CWT,
//! gate weak peaks, keep the strongest few, and centre windows on the
//! survivors. Bounding-box labels attach afterwards as interval overlaps.

pub mod denoise;
pub mod mel;
pub mod peaks;
pub mod slice;
pub mod wav;

pub use denoise::denoise;
pub use mel::{log_mel, mel_center_frequencies, MelConfig, Spectrogram, LOG_FLOOR};
pub use peaks::{
    default_widths, ricker, ricker_peaks, ricker_peaks_with, Peak, PeakList, RidgeConfig,
};
pub use slice::{
    extract_slices, extract_slices_with, label_windows, manifest_csv, parse_boxes_csv,
    BoundingBox, Slice, SliceMode, SliceSet, SlicerConfig,
};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Every recording is brought to this rate before slicing.
pub const TARGET_SAMPLE_RATE: u32 = 32_000;

/// A mono recording: finite samples at a positive rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::data("waveform has no samples"));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("waveform contains non-finite sample {bad}")));
        }
        Ok(Waveform { samples, rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    /// Pad evenly left and right with wrap-around (tiled) content until the
    /// recording holds at least `target` samples. Returns the padded wave
    /// and the left padding in samples. No-op when already long enough.
    pub fn pad_to(&self, target: usize) -> (Waveform, usize) {
        let n = self.samples.len();
        if n >= target {
            return (self.clone(), 0);
        }
        let left = (target - n) / 2;
        let samples = (0..target)
            .map(|i| {
                let src = (i as isize - left as isize).rem_euclid(n as isize) as usize;
                self.samples[src]
            })
            .collect();
        (
            Waveform { samples, rate: self.rate },
            left,
        )
    }

    /// Windowed-sinc resampling. Downsampling lowers the cutoff to the
    /// output Nyquist; the kernel is normalized per output sample so DC is
    /// preserved exactly.
    pub fn resample(&self, target_rate: u32) -> Result<Waveform> {
        if target_rate == 0 {
            return Err(Error::config("target sample rate must be positive"));
        }
        if target_rate == self.rate {
            return Ok(self.clone());
        }
        let ratio = target_rate as f64 / self.rate as f64;
        let out_len = ((self.samples.len() as f64) * ratio).round().max(1.0) as usize;
        let cutoff = 0.5 * ratio.min(1.0);
        let radius = 16.0 / ratio.min(1.0);
        let n = self.samples.len() as isize;
        let mut out = Vec::with_capacity(out_len);
        for j in 0..out_len {
            let center = j as f64 / ratio;
            let lo = (center - radius).ceil() as isize;
            let hi = (center + radius).floor() as isize;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for i in lo..=hi {
                let t = i as f64 - center;
                let w = hann(t / radius) * sinc(2.0 * cutoff * t);
                acc += w * self.samples[reflect(i, n)];
                norm += w;
            }
            out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
        }
        Waveform::new(out, target_rate)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    }
}

fn hann(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

/// Fold an arbitrary index into [0, n) by mirror reflection without edge
/// repetition, bouncing as many times as needed.
pub(crate) fn reflect(i: isize, n: isize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// `count` evenly spaced values from `lo` to `hi` inclusive.
pub(crate) fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (count - 1) as f64;
    (0..count).map(|i| lo + step * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn construction_validates_inputs() {
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 8000).is_err());
        assert!(Waveform::new(vec![0.1, -0.2], 8000).is_ok());
    }

    #[test]
    fn wrap_padding_is_even_and_tiled() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0], 10).unwrap();
        let (padded, left) = w.pad_to(7);
        assert_eq!(left, 2);
        assert_eq!(padded.samples(), &[2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0]);
        let (same, left0) = w.pad_to(2);
        assert_eq!(left0, 0);
        assert_eq!(same, w);
    }

    #[test]
    fn reflect_folds_like_a_mirror() {
        assert_eq!(reflect(0, 5), 0);
        assert_eq!(reflect(4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(8, 5), 0);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn resample_preserves_dc_exactly() {
        let w = Waveform::new(vec![0.25; 400], 16_000).unwrap();
        let up = w.resample(32_000).unwrap();
        assert_eq!(up.len(), 800);
        for &v in up.samples() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_keeps_a_tone_intact() {
        let rate = 16_000u32;
        let n = 4000;
        let f = 440.0;
        let samples: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / rate as f64).sin())
            .collect();
        let w = Waveform::new(samples, rate).unwrap();
        let up = w.resample(32_000).unwrap();
        assert_eq!(up.len(), 8000);
        // Away from the edges the upsampled signal matches the analytic tone.
        let mut worst: f64 = 0.0;
        for i in 200..7800 {
            let expect = (2.0 * std::f64::consts::PI * f * i as f64 / 32_000.0).sin();
            worst = worst.max((up.samples()[i] - expect).abs());
        }
        assert!(worst < 5e-3, "worst deviation {worst}");
        // And a round trip back down stays close to the original.
        let down = up.resample(rate).unwrap();
        let mut err: f64 = 0.0;
        for i in 200..3800 {
            err = err.max((down.samples()[i] - w.samples()[i]).abs());
        }
        assert!(err < 5e-3, "round-trip deviation {err}");
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let w = Waveform::new(vec![0.1, 0.5, -0.3], 8000).unwrap();
        assert_eq!(w.resample(8000).unwrap(), w);
    }

    #[test]
    fn linspace_hits_both_endpoints() {
        let v = linspace(0.5, 2.0, 10);
        assert_eq!(v.len(), 10);
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[9], 2.0, epsilon = 1e-15);
        assert_eq!(linspace(3.0, 9.0, 1), vec![3.0]);
    }
}
