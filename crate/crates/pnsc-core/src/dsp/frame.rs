use crate::dsp::AudioBuffer;
use crate::{Error, Result};

/// 10 ms at 16 kHz.
pub const FRAME_LEN: usize = 160;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub samples: Vec<f64>,
    /// True when the trailing partial frame was zero-padded.
    pub padded: bool,
}

/// Splits a buffer into non-overlapping frames; the trailing partial frame is
/// zero-padded and flagged.
pub fn frame_signal(buf: &AudioBuffer, frame_len: usize) -> Result<Vec<Frame>> {
    if buf.samples.is_empty() {
        return Err(Error::InvalidArgument("cannot frame an empty buffer".into()));
    }
    if frame_len == 0 {
        return Err(Error::InvalidArgument("frame_len must be positive".into()));
    }
    let mut frames = Vec::with_capacity(buf.samples.len().div_ceil(frame_len));
    for (index, chunk) in buf.samples.chunks(frame_len).enumerate() {
        let mut samples = chunk.to_vec();
        let padded = samples.len() < frame_len;
        samples.resize(frame_len, 0.0);
        frames.push(Frame { index, samples, padded });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;

    #[test]
    fn exact_multiple() {
        let buf = AudioBuffer::new(vec![0.1; 480], SAMPLE_RATE);
        let frames = frame_signal(&buf, FRAME_LEN).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| !f.padded));
    }

    #[test]
    fn trailing_partial_is_padded() {
        let buf = AudioBuffer::new(vec![0.5; 500], SAMPLE_RATE);
        let frames = frame_signal(&buf, FRAME_LEN).unwrap();
        assert_eq!(frames.len(), 4);
        assert!(frames[3].padded);
        assert_eq!(frames[3].samples[20..], vec![0.0; 140][..]);
        assert_eq!(frames[3].samples[..20], vec![0.5; 20][..]);
    }

    #[test]
    fn one_second_is_100_frames() {
        let buf = AudioBuffer::new(vec![0.0; 16_000], SAMPLE_RATE);
        assert_eq!(frame_signal(&buf, FRAME_LEN).unwrap().len(), 100);
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let buf = AudioBuffer::new(vec![], SAMPLE_RATE);
        assert!(frame_signal(&buf, FRAME_LEN).is_err());
    }
}
