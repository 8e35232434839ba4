//! Per-frame feature extraction: 18 Bark cepstra from a 20 ms window
//! centered on each 10 ms frame, plus pitch period and correlation from a
//! 32 ms window.

use crate::dsp::cepstrum::{bark_cepstrum, ANALYSIS_WINDOW, NUM_CEPSTRA};
use crate::dsp::frame::FRAME_LEN;
use crate::dsp::pitch::{estimate_pitch, PITCH_MAX_PERIOD, PITCH_MIN_PERIOD};
use crate::dsp::AudioBuffer;
use crate::Result;

pub const FEATURE_DIM: usize = NUM_CEPSTRA + 2;
const PITCH_WINDOW: usize = 2 * PITCH_MAX_PERIOD;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub cepstra: [f64; NUM_CEPSTRA],
    /// Pitch period in samples, within [16, 256].
    pub pitch_period: f64,
    /// Normalized autocorrelation at the period, in [0, 1].
    pub pitch_corr: f64,
}

impl FrameFeatures {
    /// 20-dim network input: cepstra, then period mapped to [0, 1], then
    /// correlation.
    pub fn to_vector(&self) -> [f64; FEATURE_DIM] {
        let mut v = [0.0; FEATURE_DIM];
        v[..NUM_CEPSTRA].copy_from_slice(&self.cepstra);
        v[NUM_CEPSTRA] =
            (self.pitch_period - PITCH_MIN_PERIOD as f64) / (PITCH_MAX_PERIOD - PITCH_MIN_PERIOD) as f64;
        v[NUM_CEPSTRA + 1] = self.pitch_corr;
        v
    }
}

/// Slice [start, start+len) of the signal, zero-padded outside the buffer.
fn padded_window(samples: &[f64], start: isize, len: usize) -> Vec<f64> {
    let mut w = vec![0.0; len];
    for (i, slot) in w.iter_mut().enumerate() {
        let t = start + i as isize;
        if t >= 0 && (t as usize) < samples.len() {
            *slot = samples[t as usize];
        }
    }
    w
}

/// One `FrameFeatures` per 10 ms frame of the buffer.
pub fn extract_features(buf: &AudioBuffer) -> Result<Vec<FrameFeatures>> {
    let frames = crate::dsp::frame::frame_signal(buf, FRAME_LEN)?;
    let mut out = Vec::with_capacity(frames.len());
    for f in &frames {
        let center = (f.index * FRAME_LEN) as isize + FRAME_LEN as isize / 2;
        let cep_win = padded_window(&buf.samples, center - ANALYSIS_WINDOW as isize / 2, ANALYSIS_WINDOW);
        let pitch_win = padded_window(&buf.samples, center - PITCH_WINDOW as isize / 2, PITCH_WINDOW);
        let (pitch_period, pitch_corr) = estimate_pitch(&pitch_win);
        out.push(FrameFeatures { cepstra: bark_cepstrum(&cep_win), pitch_period, pitch_corr });
    }
    Ok(out)
}
