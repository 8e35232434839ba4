//! Feature quantization and the wire format.
//!
//! One `FeaturePacket` covers a 40 ms super-frame (four 10 ms frames sharing
//! one set of packed features) and occupies exactly 64 bits: 4 sync bits,
//! 50 cepstrum bits, 7 pitch-period bits, 3 pitch-correlation bits. That is
//! 1600 bits/s of payload. See FORMAT.md for the bit-exact layout.

use crate::dsp::cepstrum::NUM_CEPSTRA;
use crate::dsp::pitch::{PITCH_MAX_PERIOD, PITCH_MIN_PERIOD};
use crate::nn::checkpoint::write_file_atomic;
use crate::{Error, Result};
use std::path::Path;

pub const STREAM_MAGIC: &[u8; 4] = b"PNSS";
pub const STREAM_VERSION: u16 = 1;
pub const QUANTIZER_TABLE_V1: u8 = 1;

/// Frames per super-frame; one packet per super-frame.
pub const FRAMES_PER_PACKET: usize = 4;
pub const PACKET_BITS: usize = 64;
pub const PACKET_SECONDS: f64 = 0.04;

const SYNC_NIBBLE: u8 = 0xA;

/// Bit widths per cepstral coefficient: c0 gets 6, c1..c5 get 4, c6..c17
/// get 2. Total 50.
pub const CEPSTRUM_BITS: [u32; NUM_CEPSTRA] =
    [6, 4, 4, 4, 4, 4, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2];
pub const PERIOD_BITS: u32 = 7;
pub const CORR_BITS: u32 = 3;

/// Uniform mid-rise scalar quantizer over [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarQuantizer {
    pub lo: f64,
    pub hi: f64,
    pub bits: u32,
}

impl ScalarQuantizer {
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.levels() as f64
    }

    /// Returns (index, clamped).
    pub fn quantize(&self, x: f64) -> (u16, bool) {
        let clamped = x < self.lo || x > self.hi;
        let x = x.clamp(self.lo, self.hi);
        let idx = ((x - self.lo) / self.step()).floor() as isize;
        (idx.clamp(0, self.levels() as isize - 1) as u16, clamped)
    }

    pub fn dequantize(&self, idx: u16) -> f64 {
        self.lo + (idx as f64 + 0.5) * self.step()
    }
}

pub fn cepstrum_quantizers() -> [ScalarQuantizer; NUM_CEPSTRA] {
    let mut q = [ScalarQuantizer { lo: -2.0, hi: 2.0, bits: 2 }; NUM_CEPSTRA];
    q[0] = ScalarQuantizer { lo: -10.0, hi: 10.0, bits: 6 };
    for item in q.iter_mut().take(6).skip(1) {
        *item = ScalarQuantizer { lo: -4.0, hi: 4.0, bits: 4 };
    }
    q
}

/// The pitch period is quantized uniformly on a log axis over [16, 256].
pub fn period_to_log(period: f64) -> f64 {
    (period / PITCH_MIN_PERIOD as f64).ln()
        / (PITCH_MAX_PERIOD as f64 / PITCH_MIN_PERIOD as f64).ln()
}

pub fn period_from_log(y: f64) -> f64 {
    PITCH_MIN_PERIOD as f64 * (PITCH_MAX_PERIOD as f64 / PITCH_MIN_PERIOD as f64).powf(y)
}

pub fn period_quantizer() -> ScalarQuantizer {
    ScalarQuantizer { lo: 0.0, hi: 1.0, bits: PERIOD_BITS }
}

pub fn corr_quantizer() -> ScalarQuantizer {
    ScalarQuantizer { lo: 0.0, hi: 1.0, bits: CORR_BITS }
}

/// Raw (unquantized) features of one super-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperFrameFeatures {
    pub cepstra: [f64; NUM_CEPSTRA],
    pub pitch_period: f64,
    pub pitch_corr: f64,
}

/// Quantized feature indices of one 40 ms super-frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePacket {
    pub frame_index: u32,
    pub cepstra: [u16; NUM_CEPSTRA],
    pub pitch_period: u16,
    pub pitch_correlation: u16,
}

pub fn quantize_features(frame_index: u32, raw: &SuperFrameFeatures) -> (FeaturePacket, bool) {
    let qs = cepstrum_quantizers();
    let mut cepstra = [0u16; NUM_CEPSTRA];
    let mut clamped = false;
    for i in 0..NUM_CEPSTRA {
        let (idx, c) = qs[i].quantize(raw.cepstra[i]);
        cepstra[i] = idx;
        clamped |= c;
    }
    let (p, cp) = period_quantizer().quantize(period_to_log(raw.pitch_period));
    let (r, cr) = corr_quantizer().quantize(raw.pitch_corr);
    (
        FeaturePacket { frame_index, cepstra, pitch_period: p, pitch_correlation: r },
        clamped | cp | cr,
    )
}

pub fn dequantize_features(packet: &FeaturePacket) -> SuperFrameFeatures {
    let qs = cepstrum_quantizers();
    let mut cepstra = [0.0; NUM_CEPSTRA];
    for i in 0..NUM_CEPSTRA {
        cepstra[i] = qs[i].dequantize(packet.cepstra[i]);
    }
    SuperFrameFeatures {
        cepstra,
        pitch_period: period_from_log(period_quantizer().dequantize(packet.pitch_period)),
        pitch_corr: corr_quantizer().dequantize(packet.pitch_correlation),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub sample_rate: u32,
    /// Total group count C.
    pub group_count: u16,
    /// Classified group index c*, < C.
    pub group_index: u16,
    pub quantizer_table: u8,
}

impl StreamHeader {
    pub fn new(group_count: u16, group_index: u16) -> Result<Self> {
        if group_count == 0 || group_index >= group_count {
            return Err(Error::InvalidArgument(format!(
                "group index {} out of range for C={}",
                group_index, group_count
            )));
        }
        Ok(Self {
            sample_rate: crate::dsp::SAMPLE_RATE,
            group_count,
            group_index,
            quantizer_table: QUANTIZER_TABLE_V1,
        })
    }
}

/// ceil(log2 C); the side-channel cost of the group index in bits.
pub fn group_index_bits(group_count: u32) -> u32 {
    assert!(group_count >= 1, "C must be at least 1");
    32 - (group_count - 1).leading_zeros()
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), bit: 0 }
    }

    /// MSB-first.
    fn put(&mut self, value: u32, bits: u32) {
        for i in (0..bits).rev() {
            if self.bit % 8 == 0 {
                self.bytes.push(0);
            }
            let b = (value >> i) & 1;
            let byte = self.bytes.last_mut().unwrap();
            *byte |= (b as u8) << (7 - (self.bit % 8));
            self.bit += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, bit: 0 }
    }

    fn get(&mut self, bits: u32) -> Option<u32> {
        let mut v = 0u32;
        for _ in 0..bits {
            let byte = self.bytes.get(self.bit / 8)?;
            v = (v << 1) | ((byte >> (7 - (self.bit % 8))) & 1) as u32;
            self.bit += 1;
        }
        Some(v)
    }
}

fn pack_packet(w: &mut BitWriter, p: &FeaturePacket) {
    w.put(SYNC_NIBBLE as u32, 4);
    for (i, bits) in CEPSTRUM_BITS.iter().enumerate() {
        w.put(p.cepstra[i] as u32, *bits);
    }
    w.put(p.pitch_period as u32, PERIOD_BITS);
    w.put(p.pitch_correlation as u32, CORR_BITS);
}

pub fn pack_stream(header: &StreamHeader, packets: &[FeaturePacket]) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + packets.len() * 8);
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&header.sample_rate.to_le_bytes());
    out.extend_from_slice(&header.group_count.to_le_bytes());
    out.extend_from_slice(&header.group_index.to_le_bytes());
    out.push(header.quantizer_table);
    out.extend_from_slice(&(packets.len() as u32).to_le_bytes());
    for p in packets {
        let mut w = BitWriter::new();
        pack_packet(&mut w, p);
        debug_assert_eq!(w.bytes.len(), 8);
        out.extend_from_slice(&w.bytes);
    }
    out
}

pub fn unpack_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<FeaturePacket>)> {
    if bytes.len() < 19 {
        return Err(Error::StreamDecode("stream shorter than header".into()));
    }
    if &bytes[0..4] != STREAM_MAGIC {
        return Err(Error::StreamDecode("bad magic".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != STREAM_VERSION {
        return Err(Error::StreamDecode(format!("unsupported version {}", version)));
    }
    let sample_rate = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let group_count = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
    let group_index = u16::from_le_bytes(bytes[12..14].try_into().unwrap());
    let quantizer_table = bytes[14];
    if group_count == 0 || group_index >= group_count {
        return Err(Error::StreamDecode(format!(
            "group index {} out of range for C={}",
            group_index, group_count
        )));
    }
    if quantizer_table != QUANTIZER_TABLE_V1 {
        return Err(Error::StreamDecode(format!("unknown quantizer table {}", quantizer_table)));
    }
    let count = u32::from_le_bytes(bytes[15..19].try_into().unwrap()) as usize;
    let body = &bytes[19..];
    let mut packets = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * 8;
        if start + 8 > body.len() {
            return Err(Error::StreamTruncated { packet_index: i });
        }
        let mut r = BitReader::new(&body[start..start + 8]);
        let sync = r.get(4).unwrap() as u8;
        if sync != SYNC_NIBBLE {
            return Err(Error::StreamDecode(format!("bad sync nibble in packet {}", i)));
        }
        let mut cepstra = [0u16; NUM_CEPSTRA];
        for (slot, bits) in cepstra.iter_mut().zip(CEPSTRUM_BITS.iter()) {
            *slot = r.get(*bits).unwrap() as u16;
        }
        let pitch_period = r.get(PERIOD_BITS).unwrap() as u16;
        let pitch_correlation = r.get(CORR_BITS).unwrap() as u16;
        packets.push(FeaturePacket { frame_index: i as u32, cepstra, pitch_period, pitch_correlation });
    }
    if body.len() != count * 8 {
        return Err(Error::StreamDecode("trailing bytes after last packet".into()));
    }
    let header =
        StreamHeader { sample_rate, group_count, group_index, quantizer_table };
    Ok((header, packets))
}

/// Payload bits per second, excluding the one-time header.
pub fn bitrate(packets: &[FeaturePacket]) -> Result<f64> {
    if packets.is_empty() {
        return Err(Error::InvalidArgument("bitrate of an empty stream".into()));
    }
    let bits = (packets.len() * PACKET_BITS) as f64;
    Ok(bits / (packets.len() as f64 * PACKET_SECONDS))
}

pub fn write_stream(path: &Path, header: &StreamHeader, packets: &[FeaturePacket]) -> Result<()> {
    write_file_atomic(path, &pack_stream(header, packets))
}

pub fn read_stream(path: &Path) -> Result<(StreamHeader, Vec<FeaturePacket>)> {
    unpack_stream(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_packet(rng: &mut ChaCha8Rng, frame_index: u32) -> FeaturePacket {
        let mut cepstra = [0u16; NUM_CEPSTRA];
        for (i, bits) in CEPSTRUM_BITS.iter().enumerate() {
            cepstra[i] = rng.gen_range(0..(1u16 << bits));
        }
        FeaturePacket {
            frame_index,
            cepstra,
            pitch_period: rng.gen_range(0..128),
            pitch_correlation: rng.gen_range(0..8),
        }
    }

    #[test]
    fn reconstruction_levels_round_trip_exactly() {
        for q in cepstrum_quantizers() {
            for idx in 0..q.levels() as u16 {
                let x = q.dequantize(idx);
                let (back, clamped) = q.quantize(x);
                assert_eq!(back, idx);
                assert!(!clamped);
            }
        }
    }

    #[test]
    fn out_of_range_clamps_and_flags() {
        let raw = SuperFrameFeatures { cepstra: [99.0; NUM_CEPSTRA], pitch_period: 80.0, pitch_corr: 0.5 };
        let (p, clamped) = quantize_features(0, &raw);
        assert!(clamped);
        assert_eq!(p.cepstra[0], 63);
        assert_eq!(p.cepstra[17], 3);
    }

    #[test]
    fn round_trip_error_bounded_by_table_walk() {
        // Oracle: walk each quantizer's reconstruction table and verify the
        // chosen level is within step/2 of the input.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qs = cepstrum_quantizers();
        for _ in 0..200 {
            let mut cepstra = [0.0; NUM_CEPSTRA];
            for (i, c) in cepstra.iter_mut().enumerate() {
                *c = rng.gen_range(qs[i].lo..qs[i].hi);
            }
            let raw = SuperFrameFeatures {
                cepstra,
                pitch_period: rng.gen_range(16.0..256.0),
                pitch_corr: rng.gen_range(0.0..1.0),
            };
            let (p, clamped) = quantize_features(7, &raw);
            assert!(!clamped);
            let back = dequantize_features(&p);
            for i in 0..NUM_CEPSTRA {
                assert!((back.cepstra[i] - raw.cepstra[i]).abs() <= qs[i].step() / 2.0 + 1e-12);
            }
            // period error bounded in the log domain it is quantized in
            let dy = (period_to_log(back.pitch_period) - period_to_log(raw.pitch_period)).abs();
            assert!(dy <= period_quantizer().step() / 2.0 + 1e-12);
            assert!((back.pitch_corr - raw.pitch_corr).abs() <= corr_quantizer().step() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn group_index_bits_values() {
        assert_eq!(group_index_bits(4), 2);
        assert_eq!(group_index_bits(1), 0);
        assert_eq!(group_index_bits(5), 3);
        let mut prev = 0;
        for c in 1..100 {
            let b = group_index_bits(c);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn header_only_stream_round_trips() {
        let h = StreamHeader::new(4, 2).unwrap();
        let bytes = pack_stream(&h, &[]);
        let (h2, ps) = unpack_stream(&bytes).unwrap();
        assert_eq!(h, h2);
        assert!(ps.is_empty());
    }

    #[test]
    fn many_packets_round_trip_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = StreamHeader::new(4, 1).unwrap();
        let packets: Vec<FeaturePacket> = (0..100).map(|i| random_packet(&mut rng, i)).collect();
        let bytes = pack_stream(&h, &packets);
        let (h2, p2) = unpack_stream(&bytes).unwrap();
        assert_eq!(pack_stream(&h2, &p2), bytes);
        assert_eq!(p2, packets);
    }

    #[test]
    fn truncation_names_the_packet() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = StreamHeader::new(2, 0).unwrap();
        let packets: Vec<FeaturePacket> = (0..5).map(|i| random_packet(&mut rng, i)).collect();
        let mut bytes = pack_stream(&h, &packets);
        bytes.truncate(bytes.len() - 12); // cuts into packet 3
        match unpack_stream(&bytes) {
            Err(Error::StreamTruncated { packet_index }) => assert_eq!(packet_index, 3),
            other => panic!("expected truncation error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn invalid_group_index_rejected() {
        assert!(StreamHeader::new(4, 4).is_err());
        assert!(StreamHeader::new(0, 0).is_err());
    }

    #[test]
    fn bitrate_is_1600() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let packets: Vec<FeaturePacket> = (0..250).map(|i| random_packet(&mut rng, i)).collect();
        assert_eq!(bitrate(&packets).unwrap(), 1600.0);
        assert!(bitrate(&[]).is_err());
    }
}
