//! Minimal RIFF/WAVE I/O: mono 16-bit PCM only, which is all the bench
//! fixtures use. Samples map to [-1, 1] as value / 32768.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

const PCM_SCALE: f64 = 32_768.0;

/// Read a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err("truncated chunk".into());
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too short".into());
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    if format != 1 {
        return Err(format!("unsupported format tag {format}, want PCM"));
    }
    if channels != 1 {
        return Err(format!("unsupported channel count {channels}, want mono"));
    }
    if bits != 16 {
        return Err(format!("unsupported bit depth {bits}, want 16"));
    }
    let data = data.ok_or("missing data chunk")?;
    if data.len() % 2 != 0 {
        return Err("odd data chunk length".into());
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / PCM_SCALE)
        .collect();
    Waveform::new(samples, rate).map_err(|e| e.to_string())
}

/// Write a waveform as mono 16-bit PCM, clamping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let n = wave.len();
    let data_len = 2 * n;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.rate().to_le_bytes());
    out.extend_from_slice(&(wave.rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in wave.samples() {
        let q = (s * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
