//! Channel-wise robust denoising. Each spectrogram row is reduced to its
//! deviations from a robust mean; everything within the noise band becomes
//! exactly zero.

use crate::matrix::DenseMatrix;

use super::Spectrogram;

const INLIER_BAND: f64 = 1.5;
const SIGNAL_BAND: f64 = 0.75;

/// Denoise a spectrogram row by row.
///
/// Per channel: frames within 1.5 population standard deviations of the
/// channel mean are treated as noise; their robust mean and deviation are
/// estimated with a +1 smoothing denominator. Frames further than 0.75
/// robust deviations from the robust mean keep their offset from it, the
/// rest are zeroed. A perfectly constant channel is entirely noise and
/// comes back as zeros.
pub fn denoise(spec: &Spectrogram) -> Spectrogram {
    let rows = spec.values.rows();
    let cols = spec.values.cols();
    let mut out = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        let row = spec.values.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd == 0.0 {
            continue;
        }
        let inliers: Vec<f64> = row
            .iter()
            .copied()
            .filter(|x| (x - mean).abs() <= INLIER_BAND * sd)
            .collect();
        let denom = inliers.len() as f64 + 1.0;
        let robust_mean = inliers.iter().sum::<f64>() / denom;
        let robust_var = inliers.iter().map(|x| (x - robust_mean).powi(2)).sum::<f64>() / denom;
        let robust_sd = robust_var.sqrt();
        for (t, &x) in row.iter().enumerate() {
            if (x - robust_mean).abs() > SIGNAL_BAND * robust_sd {
                out.set(r, t, x - robust_mean);
            }
        }
    }
    Spectrogram { values: out, frame_rate: spec.frame_rate, log_scaled: false }
}
