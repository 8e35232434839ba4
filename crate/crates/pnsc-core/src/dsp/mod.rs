//! Deterministic signal-processing front end: framing, LPC analysis, Bark
//! cepstrum, pitch and mu-law. All operations are pure functions.

pub mod cepstrum;
pub mod features;
pub mod frame;
pub mod lpc;
pub mod mulaw;
pub mod pitch;
pub mod wav;

pub use cepstrum::{bark_cepstrum, lpc_from_cepstrum, NUM_CEPSTRA};
pub use features::{extract_features, FrameFeatures};
pub use frame::{frame_signal, Frame, FRAME_LEN};
pub use lpc::{autocorrelate, excitation, levinson_durbin, lpc_predict, LpcCoeffs, LPC_ORDER};
pub use mulaw::{mulaw_decode, mulaw_encode};
pub use pitch::{estimate_pitch, PITCH_MAX_PERIOD, PITCH_MIN_PERIOD};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM signal normalized to [-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
