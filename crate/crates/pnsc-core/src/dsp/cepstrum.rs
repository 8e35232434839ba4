//! Bark-scale cepstrum of a 20 ms analysis window, and the inverse path that
//! recovers LPC coefficients from a (de)quantized cepstrum.
//!
//! Forward: Hann window -> 320-point FFT -> power per Bark band (18 bands,
//! equal width on the Bark axis, mean power per band) -> natural log with a
//! floor at -10 -> DCT-II scaled so c0 is the mean band log-energy.
//! Inverse: inverse DCT -> piecewise-constant power spectrum over the bands
//! -> inverse FFT autocorrelation -> Levinson-Durbin.

use crate::dsp::lpc::{levinson_durbin, LpcCoeffs, LPC_ORDER};
use rustfft::{num_complex::Complex, FftPlanner};
use std::cell::RefCell;
use std::sync::Arc;

pub const NUM_CEPSTRA: usize = 18;
pub const ANALYSIS_WINDOW: usize = 320;
pub const LOG_ENERGY_FLOOR: f64 = -10.0;

const NUM_BINS: usize = ANALYSIS_WINDOW / 2 + 1; // 161, dc..nyquist

fn bark(freq_hz: f64) -> f64 {
    13.0 * (0.00076 * freq_hz).atan() + 3.5 * ((freq_hz / 7500.0).powi(2)).atan()
}

/// Band index for each FFT bin, precomputed once.
fn band_map() -> &'static [usize; NUM_BINS] {
    use std::sync::OnceLock;
    static MAP: OnceLock<[usize; NUM_BINS]> = OnceLock::new();
    MAP.get_or_init(|| {
        let top = bark(8000.0);
        let mut map = [0usize; NUM_BINS];
        for (bin, slot) in map.iter_mut().enumerate() {
            let f = bin as f64 * 16_000.0 / ANALYSIS_WINDOW as f64;
            let b = (bark(f) / top * NUM_CEPSTRA as f64).floor() as usize;
            *slot = b.min(NUM_CEPSTRA - 1);
        }
        map
    })
}

thread_local! {
    static FFT: RefCell<Option<Arc<dyn rustfft::Fft<f64>>>> = const { RefCell::new(None) };
}

fn fft_forward(buf: &mut [Complex<f64>]) {
    FFT.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.is_none() {
            *slot = Some(FftPlanner::new().plan_fft_forward(ANALYSIS_WINDOW));
        }
        slot.as_ref().unwrap().process(buf);
    });
}

/// Power per Bark band of a 320-sample window (Hann-windowed, mean power of
/// the band's bins).
fn band_powers(window: &[f64]) -> [f64; NUM_CEPSTRA] {
    assert_eq!(window.len(), ANALYSIS_WINDOW, "analysis window must be 320 samples");
    let mut buf: Vec<Complex<f64>> = window
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = 0.5
                - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / ANALYSIS_WINDOW as f64).cos();
            Complex::new(v * w, 0.0)
        })
        .collect();
    fft_forward(&mut buf);
    let mut acc = [0.0f64; NUM_CEPSTRA];
    let mut count = [0usize; NUM_CEPSTRA];
    let map = band_map();
    for bin in 0..NUM_BINS {
        let p = buf[bin].norm_sqr();
        acc[map[bin]] += p;
        count[map[bin]] += 1;
    }
    for b in 0..NUM_CEPSTRA {
        acc[b] /= count[b].max(1) as f64;
    }
    acc
}

/// 18 Bark cepstral coefficients; coefficient 0 carries the (floored) log
/// energy.
pub fn bark_cepstrum(window: &[f64]) -> [f64; NUM_CEPSTRA] {
    let powers = band_powers(window);
    let mut logs = [0.0f64; NUM_CEPSTRA];
    for b in 0..NUM_CEPSTRA {
        logs[b] = if powers[b] > 0.0 { powers[b].ln().max(LOG_ENERGY_FLOOR) } else { LOG_ENERGY_FLOOR };
    }
    let b_total = NUM_CEPSTRA as f64;
    let mut c = [0.0f64; NUM_CEPSTRA];
    c[0] = logs.iter().sum::<f64>() / b_total;
    for (i, ci) in c.iter_mut().enumerate().skip(1) {
        let mut acc = 0.0;
        for (b, lb) in logs.iter().enumerate() {
            acc += lb * (std::f64::consts::PI * i as f64 * (b as f64 + 0.5) / b_total).cos();
        }
        *ci = 2.0 / b_total * acc;
    }
    c
}

/// Band log-energies from a cepstrum (inverse DCT).
pub fn band_logs_from_cepstrum(c: &[f64]) -> [f64; NUM_CEPSTRA] {
    let b_total = NUM_CEPSTRA as f64;
    let mut logs = [0.0f64; NUM_CEPSTRA];
    for (b, lb) in logs.iter_mut().enumerate() {
        let mut acc = c[0];
        for (i, ci) in c.iter().enumerate().skip(1) {
            acc += ci * (std::f64::consts::PI * i as f64 * (b as f64 + 0.5) / b_total).cos();
        }
        *lb = acc;
    }
    logs
}

/// LPC coefficients implied by a (de)quantized cepstrum: spectral envelope ->
/// autocorrelation -> Levinson-Durbin.
pub fn lpc_from_cepstrum(c: &[f64]) -> LpcCoeffs {
    let logs = band_logs_from_cepstrum(c);
    let map = band_map();
    let mut power = [0.0f64; NUM_BINS];
    for bin in 0..NUM_BINS {
        power[bin] = logs[map[bin]].exp();
    }
    let n = ANALYSIS_WINDOW as f64;
    let mut r = [0.0f64; LPC_ORDER + 1];
    for (k, rk) in r.iter_mut().enumerate() {
        let mut acc = power[0];
        for (bin, p) in power.iter().enumerate().take(NUM_BINS - 1).skip(1) {
            acc += 2.0 * p * (2.0 * std::f64::consts::PI * bin as f64 * k as f64 / n).cos();
        }
        acc += power[NUM_BINS - 1] * (std::f64::consts::PI * k as f64).cos();
        *rk = acc / n;
    }
    // small white-noise floor and lag window keep the filter comfortably stable
    r[0] *= 1.0001;
    for (k, rk) in r.iter_mut().enumerate().skip(1) {
        *rk *= (-0.5 * (0.008 * k as f64).powi(2)).exp();
    }
    levinson_durbin(&r, LPC_ORDER)
}
