//! WAV reader/writer for PCM 16-bit mono 16 kHz little-endian files.
//! Anything else is rejected with a typed error.

use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::nn::checkpoint::write_file_atomic;
use crate::{Error, Result};
use std::path::Path;

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::WavFormat { path: path.to_path_buf(), reason: reason.into() }
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fmt_err(path, "not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt_ok = false;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fmt_err(path, "truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fmt_err(path, "fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if audio_format != 1 {
                    return Err(fmt_err(path, format!("unsupported codec {}", audio_format)));
                }
                if channels != 1 {
                    return Err(fmt_err(path, format!("expected mono, got {} channels", channels)));
                }
                if rate != SAMPLE_RATE {
                    return Err(fmt_err(path, format!("expected 16000 Hz, got {}", rate)));
                }
                if bits != 16 {
                    return Err(fmt_err(path, format!("expected 16-bit, got {}", bits)));
                }
                fmt_ok = true;
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    if !fmt_ok {
        return Err(fmt_err(path, "missing fmt chunk"));
    }
    let data = data.ok_or_else(|| fmt_err(path, "missing data chunk"))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
        .collect();
    Ok(AudioBuffer::new(samples, SAMPLE_RATE))
}

pub fn write_wav(path: &Path, buf: &AudioBuffer) -> Result<()> {
    if buf.sample_rate != SAMPLE_RATE {
        return Err(fmt_err(path, format!("writer only supports 16000 Hz, got {}", buf.sample_rate)));
    }
    let n = buf.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &buf.samples {
        let v = (s.clamp(-1.0, 1.0 - 1.0 / 32768.0) * 32768.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file_atomic(path, &out)
}
