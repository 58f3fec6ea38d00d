//! Log-mel spectrograms via a Hann-windowed FFT and an HTK-style
//! triangular mel filter bank.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

use super::Waveform;

/// Added inside the log so silent frames stay finite: ln(0 + floor).
pub const LOG_FLOOR: f64 = 1e-10;

const FMIN_HZ: f64 = 60.0;
const FMAX_HZ: f64 = 16_000.0;

/// Spectrogram parameters. Defaults match the slicing pipeline: 160 mel
/// channels, 2048-sample analysis window, 320-sample stride.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub bins: usize,
    pub window: usize,
    pub stride: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { bins: 160, window: 2048, stride: 320 }
    }
}

impl MelConfig {
    fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::config("mel bins must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if self.window < self.stride {
            return Err(Error::config(format!(
                "window {} must be at least the stride {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// A channels-by-frames matrix with its frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: DenseMatrix,
    pub frame_rate: f64,
    pub log_scaled: bool,
}

impl Spectrogram {
    /// Sum over channels, one value per frame.
    pub fn channel_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.cols()];
        for r in 0..self.values.rows() {
            for (t, v) in self.values.row(r).iter().enumerate() {
                out[t] += v;
            }
        }
        out
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn mel_points(bins: usize, rate: u32) -> Vec<f64> {
    let fmax = FMAX_HZ.min(rate as f64 / 2.0);
    super::linspace(hz_to_mel(FMIN_HZ), hz_to_mel(fmax), bins + 2)
        .into_iter()
        .map(mel_to_hz)
        .collect()
}

/// Center frequency in Hz of each mel channel, for the given config and rate.
pub fn mel_center_frequencies(cfg: &MelConfig, rate: u32) -> Vec<f64> {
    let pts = mel_points(cfg.bins, rate);
    pts[1..=cfg.bins].to_vec()
}

/// Compute a log-mel spectrogram. Recordings shorter than one window are
/// wrap-padded up to it first; the frame count is ceil(len / stride) with
/// zero padding past the end of the signal.
pub fn log_mel(wave: &Waveform, cfg: &MelConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let (wave, _) = wave.pad_to(cfg.window);
    let samples = wave.samples();
    let n = samples.len();
    let frames = n.div_ceil(cfg.stride);
    let half = cfg.window / 2;

    let window: Vec<f64> = (0..cfg.window)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / cfg.window as f64).cos()))
        .collect();
    let filters = build_filters(cfg, wave.rate());

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.window);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    let mut power = vec![0.0; half + 1];
    let mut values = DenseMatrix::zeros(cfg.bins, frames);

    for t in 0..frames {
        let start = t * cfg.stride;
        for i in 0..cfg.window {
            let s = if start + i < n { samples[start + i] } else { 0.0 };
            buf[i] = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (b, filter) in filters.iter().enumerate() {
            let mut e = 0.0;
            for &(k, w) in filter {
                e += w * power[k];
            }
            values.set(b, t, (e + LOG_FLOOR).ln());
        }
    }

    Ok(Spectrogram {
        values,
        frame_rate: wave.rate() as f64 / cfg.stride as f64,
        log_scaled: true,
    })
}

/// Sparse triangular filters: per channel, the contributing FFT bins and
/// their weights.
fn build_filters(cfg: &MelConfig, rate: u32) -> Vec<Vec<(usize, f64)>> {
    let pts = mel_points(cfg.bins, rate);
    let half = cfg.window / 2;
    let hz_per_bin = rate as f64 / cfg.window as f64;
    let mut filters = Vec::with_capacity(cfg.bins);
    for b in 0..cfg.bins {
        let (left, center, right) = (pts[b], pts[b + 1], pts[b + 2]);
        let mut taps = Vec::new();
        for k in 0..=half {
            let f = k as f64 * hz_per_bin;
            let w = if f > left && f < center {
                (f - left) / (center - left)
            } else if (f - center).abs() < 1e-12 {
                1.0
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((k, w));
            }
        }
        filters.push(taps);
    }
    filters
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn silence_maps_to_the_log_floor() {
        let wave = Waveform::new(vec![0.0; 32_000], 32_000).unwrap();
        let spec = log_mel(&wave, &MelConfig::default()).unwrap();
        assert_eq!(spec.values.rows(), 160);
        assert_eq!(spec.values.cols(), 100);
        let expect = LOG_FLOOR.ln();
        for b in 0..spec.values.rows() {
            for &v in spec.values.row(b) {
                assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn frame_count_is_ceil_len_over_stride() {
        let wave = Waveform::new(vec![0.0; 5000], 32_000).unwrap();
        let spec = log_mel(&wave, &MelConfig::default()).unwrap();
        assert_eq!(spec.values.cols(), 16);
        assert_abs_diff_eq!(spec.frame_rate, 100.0, epsilon = 1e-12);

        // Shorter than a window: padded to the window first.
        let short = Waveform::new(vec![0.1; 1000], 32_000).unwrap();
        let spec = log_mel(&short, &MelConfig::default()).unwrap();
        assert_eq!(spec.values.cols(), 2048usize.div_ceil(320));
    }

    #[test]
    fn pure_tone_lands_in_the_matching_channel() {
        let rate = 32_000u32;
        let f = 1000.0;
        let samples: Vec<f64> = (0..rate as usize)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / rate as f64).sin())
            .collect();
        let wave = Waveform::new(samples, rate).unwrap();
        let cfg = MelConfig::default();
        let spec = log_mel(&wave, &cfg).unwrap();
        let centers = mel_center_frequencies(&cfg, rate);
        let target = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - f).abs().partial_cmp(&(b.1 - f).abs()).unwrap()
            })
            .unwrap()
            .0;
        // Middle frame, fully inside the tone.
        let t = spec.values.cols() / 2;
        let loudest = (0..spec.values.rows())
            .max_by(|&a, &b| {
                spec.values.get(a, t).partial_cmp(&spec.values.get(b, t)).unwrap()
            })
            .unwrap();
        assert!(
            (loudest as isize - target as isize).abs() <= 1,
            "tone peaked in channel {loudest}, expected near {target}"
        );
    }

    #[test]
    fn center_frequencies_are_monotonic_and_bounded() {
        let cfg = MelConfig::default();
        let centers = mel_center_frequencies(&cfg, 32_000);
        assert_eq!(centers.len(), 160);
        assert!(centers[0] > FMIN_HZ);
        assert!(*centers.last().unwrap() < 16_000.0);
        for w in centers.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let wave = Waveform::new(vec![0.0; 100], 8000).unwrap();
        let bad = MelConfig { bins: 0, ..MelConfig::default() };
        assert!(log_mel(&wave, &bad).is_err());
        let bad = MelConfig { stride: 0, ..MelConfig::default() };
        assert!(log_mel(&wave, &bad).is_err());
        let bad = MelConfig { window: 100, stride: 200, bins: 4 };
        assert!(log_mel(&wave, &bad).is_err());
    }

    #[test]
    fn channel_sum_adds_rows() {
        let mut values = DenseMatrix::zeros(2, 3);
        values.set(0, 0, 1.0);
        values.set(0, 2, 2.0);
        values.set(1, 0, 10.0);
        values.set(1, 1, 5.0);
        let spec = Spectrogram { values, frame_rate: 10.0, log_scaled: false };
        assert_eq!(spec.channel_sum(), vec![11.0, 5.0, 2.0]);
    }
}
