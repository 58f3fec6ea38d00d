//! Peak finding on a 1-D signal with a Ricker-wavelet continuous wavelet
//! transform: compute CWT rows over a range of widths, link per-row local
//! maxima into ridge lines across scales, then keep ridges that are long
//! enough and stand clear of the noise floor.

use crate::error::{Error, Result};

/// A surviving peak: frame index plus the strength backing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub prominence: f64,
}

pub type PeakList = Vec<Peak>;

/// Ridge filtering knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeConfig {
    /// A ridge must span at least this fraction of the width ladder.
    pub min_length_frac: f64,
    /// Minimum ratio between ridge strength and the noise floor.
    pub min_snr: f64,
    /// Scales a ridge may skip before it is retired.
    pub gap_threshold: usize,
    /// Kernel support in multiples of the wavelet width.
    pub kernel_factor: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            min_length_frac: 0.5,
            min_snr: 2.0,
            gap_threshold: 2,
            kernel_factor: 8.0,
        }
    }
}

impl RidgeConfig {
    fn validate(&self) -> Result<()> {
        if !(self.min_length_frac > 0.0 && self.min_length_frac <= 1.0) {
            return Err(Error::config("min_length_frac must be in (0, 1]"));
        }
        if !(self.min_snr > 0.0) {
            return Err(Error::config("min_snr must be positive"));
        }
        if !(self.kernel_factor > 0.0) {
            return Err(Error::config("kernel_factor must be positive"));
        }
        Ok(())
    }
}

/// The classic Ricker (mexican hat) wavelet sampled at `points` positions
/// centred on zero, with width parameter `a`.
pub fn ricker(points: usize, a: f64) -> Vec<f64> {
    let amp = 2.0 / ((3.0 * a).sqrt() * std::f64::consts::PI.powf(0.25));
    (0..points)
        .map(|i| {
            let x = i as f64 - (points as f64 - 1.0) / 2.0;
            let r = x * x / (a * a);
            amp * (1.0 - r) * (-0.5 * r).exp()
        })
        .collect()
}

/// Ten widths spaced linearly between half a second and two seconds,
/// expressed in frames.
pub fn default_widths(frame_rate: f64) -> Vec<f64> {
    super::linspace(0.5 * frame_rate, 2.0 * frame_rate, 10)
}

/// Peak detection with the default ridge configuration.
pub fn ricker_peaks(signal: &[f64], widths: &[f64]) -> Result<PeakList> {
    ricker_peaks_with(signal, widths, &RidgeConfig::default())
}

/// Full CWT ridge-line peak detection.
///
/// Local maxima of each CWT row are linked across scales starting from the
/// widest: each ridge grabs the nearest maximum within a quarter width of
/// its last column, tolerating up to `gap_threshold` missed scales. A ridge
/// survives when it spans enough scales and its strength, the largest
/// smallest-width response under it, clears `min_snr` times the noise floor
/// (the 10th percentile of the absolute smallest-width row). Surviving
/// ridges report the column where they reached the smallest scale.
pub fn ricker_peaks_with(
    signal: &[f64],
    widths: &[f64],
    cfg: &RidgeConfig,
) -> Result<PeakList> {
    cfg.validate()?;
    if widths.is_empty() {
        return Err(Error::config("widths must not be empty"));
    }
    if widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::config("widths must be positive and finite"));
    }
    if widths.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::config("widths must be strictly ascending"));
    }
    if signal.len() < 3 {
        return Ok(Vec::new());
    }

    let rows: Vec<Vec<f64>> = widths
        .iter()
        .map(|&a| cwt_row(signal, a, cfg.kernel_factor))
        .collect();
    let maxima: Vec<Vec<usize>> = rows.iter().map(|r| local_maxima(r)).collect();

    struct Ridge {
        points: Vec<(usize, usize)>,
        last_col: usize,
        gap: usize,
    }

    let top = widths.len() - 1;
    let mut active: Vec<Ridge> = maxima[top]
        .iter()
        .map(|&c| Ridge { points: vec![(top, c)], last_col: c, gap: 0 })
        .collect();
    let mut finished: Vec<Ridge> = Vec::new();

    for s in (0..top).rev() {
        let max_dist = widths[s] / 4.0;
        let mut used = vec![false; maxima[s].len()];
        for ridge in active.iter_mut() {
            let mut best: Option<(usize, f64)> = None;
            for (m, &col) in maxima[s].iter().enumerate() {
                if used[m] {
                    continue;
                }
                let d = (col as f64 - ridge.last_col as f64).abs();
                if d <= max_dist && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((m, d));
                }
            }
            match best {
                Some((m, _)) => {
                    used[m] = true;
                    let col = maxima[s][m];
                    ridge.points.push((s, col));
                    ridge.last_col = col;
                    ridge.gap = 0;
                }
                None => ridge.gap += 1,
            }
        }
        let gap_limit = cfg.gap_threshold;
        let (keep, retire): (Vec<Ridge>, Vec<Ridge>) =
            active.into_iter().partition(|r| r.gap <= gap_limit);
        finished.extend(retire);
        active = keep;
        for (m, &col) in maxima[s].iter().enumerate() {
            if !used[m] {
                active.push(Ridge { points: vec![(s, col)], last_col: col, gap: 0 });
            }
        }
    }
    finished.extend(active);

    let min_len = (cfg.min_length_frac * widths.len() as f64).ceil() as usize;
    let base = &rows[0];
    let mut mags: Vec<f64> = base.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let noise_floor = mags[((mags.len() - 1) as f64 * 0.10).round() as usize];

    let mut peaks: Vec<Peak> = Vec::new();
    for ridge in &finished {
        if ridge.points.len() < min_len {
            continue;
        }
        let strength = ridge
            .points
            .iter()
            .map(|&(_, c)| base[c].abs())
            .fold(0.0f64, f64::max);
        let keep = if noise_floor > 0.0 {
            strength / noise_floor >= cfg.min_snr
        } else {
            strength > 0.0
        };
        if !keep {
            continue;
        }
        // Points are appended widest first, so the last one sits at the
        // smallest scale this ridge reached.
        let index = ridge.points.last().unwrap().1;
        peaks.push(Peak { index, prominence: strength });
    }

    peaks.sort_by(|a, b| {
        a.index
            .cmp(&b.index)
            .then(b.prominence.partial_cmp(&a.prominence).unwrap())
    });
    peaks.dedup_by(|next, first| {
        if next.index == first.index {
            first.prominence = first.prominence.max(next.prominence);
            true
        } else {
            false
        }
    });
    Ok(peaks)
}

// Zero padding, not reflection: mirroring an event near the recording edge
// merges it with its own image at wide scales and the ridge loses its top,
// so off-signal samples count as silence instead.
fn cwt_row(signal: &[f64], a: f64, kernel_factor: f64) -> Vec<f64> {
    let mut points = (kernel_factor * a).round() as usize;
    if points % 2 == 0 {
        points += 1;
    }
    points = points.max(3);
    let kernel = ricker(points, a);
    let half = points as isize / 2;
    let n = signal.len() as isize;
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let i = t + k as isize - half;
                if i >= 0 && i < n {
                    acc += w * signal[i as usize];
                }
            }
            acc
        })
        .collect()
}

fn local_maxima(row: &[f64]) -> Vec<usize> {
    (1..row.len().saturating_sub(1))
        .filter(|&t| row[t] > row[t - 1] && row[t] >= row[t + 1])
        .collect()
}
