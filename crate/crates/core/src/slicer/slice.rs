//! End of the pipeline: turn a recording into fixed-length windows centred
//! on detected peaks, and attach bounding-box labels by interval overlap.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::mel::MelConfig;
use super::peaks::RidgeConfig;
use super::{denoise, log_mel, ricker_peaks_with, Waveform, TARGET_SAMPLE_RATE};

/// What the recording is: focal source material keeps few, long windows,
/// soundscapes keep many shorter ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceMode {
    Source,
    Soundscape,
}

/// Slicing parameters; `for_mode` fills the defaults for each recording kind.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicerConfig {
    pub slice_len_s: f64,
    pub max_peaks: usize,
    pub gate_halfwidth_s: f64,
    pub gate_factor: f64,
    pub mel: MelConfig,
    pub ridge: RidgeConfig,
}

impl SlicerConfig {
    pub fn for_mode(mode: SliceMode) -> Self {
        let (slice_len_s, max_peaks) = match mode {
            SliceMode::Source => (6.0, 5),
            SliceMode::Soundscape => (5.0, 200),
        };
        SlicerConfig {
            slice_len_s,
            max_peaks,
            gate_halfwidth_s: 0.3,
            gate_factor: 1.5,
            mel: MelConfig::default(),
            ridge: RidgeConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.slice_len_s > 0.0 && self.slice_len_s.is_finite()) {
            return Err(Error::config("slice_len_s must be positive"));
        }
        if self.max_peaks == 0 {
            return Err(Error::config("max_peaks must be positive"));
        }
        if !(self.gate_halfwidth_s > 0.0) || !(self.gate_factor > 0.0) {
            return Err(Error::config("gate parameters must be positive"));
        }
        Ok(())
    }
}

/// One extracted window, in seconds relative to the padded recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub start_s: f64,
    pub dur_s: f64,
    pub labels: BTreeSet<String>,
}

/// All windows from one recording plus the geometry needed to map times
/// back to the original file.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSet {
    pub slices: Vec<Slice>,
    pub total_s: f64,
    pub pad_left_s: f64,
}

/// A labelled time interval from an annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

/// Slice a recording with the defaults for `mode`.
pub fn extract_slices(wave: &Waveform, mode: SliceMode) -> Result<SliceSet> {
    extract_slices_with(wave, &SlicerConfig::for_mode(mode))
}

/// Slice a recording: resample to the pipeline rate, pad short recordings
/// up to one window, then log-mel, denoise, channel-sum, wavelet peaks, an
/// energy gate around each peak, and finally the strongest `max_peaks`
/// peaks become centred windows shifted inward at the edges.
pub fn extract_slices_with(wave: &Waveform, cfg: &SlicerConfig) -> Result<SliceSet> {
    cfg.validate()?;
    let wave = if wave.rate() == TARGET_SAMPLE_RATE {
        wave.clone()
    } else {
        wave.resample(TARGET_SAMPLE_RATE)?
    };
    let rate = wave.rate() as f64;
    let slice_samples = (cfg.slice_len_s * rate).ceil() as usize;
    let (wave, pad_left) = wave.pad_to(slice_samples);
    let pad_left_s = pad_left as f64 / rate;
    let total_s = wave.duration_s();

    let spec = log_mel(&wave, &cfg.mel)?;
    let den = denoise(&spec);
    // Detection signal: sum only positive denoised deviations. Negative
    // ones are noise dips, and with signed sums the mean-based gate
    // threshold stops meaning anything.
    let mut signal = vec![0.0; den.values.cols()];
    for r in 0..den.values.rows() {
        for (t, &v) in den.values.row(r).iter().enumerate() {
            if v > 0.0 {
                signal[t] += v;
            }
        }
    }
    let fr = den.frame_rate;
    let widths = super::default_widths(fr);
    let peaks = ricker_peaks_with(&signal, &widths, &cfg.ridge)?;

    // Gate: a peak must sit in a window whose maximum clears a multiple of
    // the global mean signal.
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let half = (cfg.gate_halfwidth_s * fr).round() as usize;
    let mut gated: Vec<(usize, f64)> = peaks
        .iter()
        .filter_map(|p| {
            let lo = p.index.saturating_sub(half);
            let hi = (p.index + half).min(signal.len() - 1);
            let local = signal[lo..=hi].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            (local >= cfg.gate_factor * mean).then_some((p.index, signal[p.index]))
        })
        .collect();

    gated.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    gated.truncate(cfg.max_peaks);
    gated.sort_by_key(|&(t, _)| t);

    let max_start = total_s - cfg.slice_len_s;
    let mut slices: Vec<Slice> = Vec::new();
    for (t, _) in gated {
        let center = t as f64 / fr;
        let start = (center - cfg.slice_len_s / 2.0).clamp(0.0, max_start);
        if slices.last().is_some_and(|s| s.start_s == start) {
            continue;
        }
        slices.push(Slice {
            start_s: start,
            dur_s: cfg.slice_len_s,
            labels: BTreeSet::new(),
        });
    }

    Ok(SliceSet { slices, total_s, pad_left_s })
}

/// Attach labels to windows by strict interval overlap with the boxes and
/// drop windows that overlap no box at all.
pub fn label_windows(set: &SliceSet, boxes: &[BoundingBox]) -> SliceSet {
    let slices = set
        .slices
        .iter()
        .filter_map(|s| {
            let end = s.start_s + s.dur_s;
            let labels: BTreeSet<String> = boxes
                .iter()
                .filter(|b| s.start_s.max(b.start_s) < end.min(b.end_s))
                .map(|b| b.label.clone())
                .collect();
            (!labels.is_empty()).then(|| Slice {
                start_s: s.start_s,
                dur_s: s.dur_s,
                labels,
            })
        })
        .collect();
    SliceSet { slices, total_s: set.total_s, pad_left_s: set.pad_left_s }
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render a slice set as a manifest CSV with labels joined by semicolons.
pub fn manifest_csv(file: &str, set: &SliceSet) -> String {
    let mut out = String::from("file,start_s,dur_s,labels\n");
    for s in &set.slices {
        let labels = s.labels.iter().cloned().collect::<Vec<_>>().join(";");
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(file),
            s.start_s,
            s.dur_s,
            csv_field(&labels)
        ));
    }
    out
}

/// Parse an annotation CSV with columns start_s,end_s,label. Labels are
/// plain tokens without commas or quotes.
pub fn parse_boxes_csv(text: &str) -> Result<Vec<BoundingBox>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::data("empty annotation file"))?;
    if header.trim() != "start_s,end_s,label" {
        return Err(Error::data(format!("unexpected annotation header {header:?}")));
    }
    let mut boxes = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::data(format!("annotation line {} has {} fields, want 3", i + 2, parts.len())));
        }
        let start_s: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("bad start time {:?} on line {}", parts[0], i + 2)))?;
        let end_s: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("bad end time {:?} on line {}", parts[1], i + 2)))?;
        if !(start_s.is_finite() && end_s.is_finite() && start_s < end_s) {
            return Err(Error::data(format!("empty or inverted box on line {}", i + 2)));
        }
        let label = parts[2].trim();
        if label.is_empty() {
            return Err(Error::data(format!("missing label on line {}", i + 2)));
        }
        boxes.push(BoundingBox { start_s, end_s, label: label.to_string() });
    }
    Ok(boxes)
}
