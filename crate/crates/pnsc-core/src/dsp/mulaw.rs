//! 8-bit mu-law companding (mu = 255) over the continuous domain [-1, 1).
//!
//! Codes are mid-tread: code 128 decodes to exactly 0, magnitudes grow
//! logarithmically toward the edges. Code 0 decodes to -1.0.

pub const MU: f64 = 255.0;
pub const CENTER_CODE: u8 = 128;

/// Compressed magnitude in [0, 1].
fn compress(mag: f64) -> f64 {
    (1.0 + MU * mag).ln() / (1.0 + MU).ln()
}

/// Inverse of `compress`.
fn expand(y: f64) -> f64 {
    ((1.0 + MU).powf(y) - 1.0) / MU
}

pub fn mulaw_encode(x: f64) -> u8 {
    let x = x.clamp(-1.0, 1.0 - 1e-9);
    let m = (compress(x.abs()) * 128.0).round() as i32;
    if x >= 0.0 {
        (128 + m.min(127)) as u8
    } else {
        (128 - m.min(128)) as u8
    }
}

pub fn mulaw_decode(code: u8) -> f64 {
    let c = code as i32;
    if c >= 128 {
        expand((c - 128) as f64 / 128.0)
    } else {
        -expand((128 - c) as f64 / 128.0)
    }
}
