//! Pitch by normalized-autocorrelation peak picking with parabolic
//! interpolation around the best integer lag.

/// 1 kHz upper bound at 16 kHz.
pub const PITCH_MIN_PERIOD: usize = 16;
/// 62.5 Hz lower bound at 16 kHz.
pub const PITCH_MAX_PERIOD: usize = 256;

const SILENCE_ENERGY: f64 = 1e-9;

/// Returns (period in samples, normalized correlation in [0, 1]).
/// Silence reports the minimum period with zero correlation.
pub fn estimate_pitch(window: &[f64]) -> (f64, f64) {
    assert!(
        window.len() >= 2 * PITCH_MAX_PERIOD,
        "pitch window must hold at least two maximum periods"
    );
    let energy: f64 = window.iter().map(|v| v * v).sum();
    if energy < SILENCE_ENERGY {
        return (PITCH_MIN_PERIOD as f64, 0.0);
    }

    let score = |lag: usize| -> f64 {
        let n = window.len() - lag;
        let mut cross = 0.0;
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for t in 0..n {
            cross += window[t] * window[t + lag];
            e0 += window[t] * window[t];
            e1 += window[t + lag] * window[t + lag];
        }
        let denom = (e0 * e1).sqrt();
        if denom > 0.0 {
            cross / denom
        } else {
            0.0
        }
    };

    let scores: Vec<f64> = (PITCH_MIN_PERIOD..=PITCH_MAX_PERIOD).map(score).collect();
    let global = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Octave guard: a lag of 2p scores as high as p on periodic signals, so
    // take the shortest lag within 3% of the global peak.
    let threshold = if global > 0.0 { 0.97 * global } else { global };
    let mut idx = scores.iter().position(|c| *c >= threshold).unwrap_or(0);
    // climb to the local peak of the candidate lobe
    while idx + 1 < scores.len() && scores[idx + 1] > scores[idx] {
        idx += 1;
    }
    let best_lag = PITCH_MIN_PERIOD + idx;
    let best = scores[idx];

    // Parabolic refinement on the three lags around the peak.
    let mut period = best_lag as f64;
    if best_lag > PITCH_MIN_PERIOD && best_lag < PITCH_MAX_PERIOD {
        let (ym, y0, yp) = (score(best_lag - 1), best, score(best_lag + 1));
        let denom = ym - 2.0 * y0 + yp;
        if denom.abs() > 1e-12 {
            let delta = 0.5 * (ym - yp) / denom;
            if delta.abs() <= 1.0 {
                period += delta;
            }
        }
    }
    period = period.clamp(PITCH_MIN_PERIOD as f64, PITCH_MAX_PERIOD as f64);
    (period, best.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_200hz_gives_80_sample_period() {
        let n = 640;
        let w: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * 200.0 * t as f64 / 16_000.0).sin())
            .collect();
        let (period, corr) = estimate_pitch(&w);
        assert!((period - 80.0).abs() <= 1.0, "period = {}", period);
        assert!(corr > 0.99);
    }

    #[test]
    fn white_noise_has_low_correlation() {
        let mut total = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..640).map(|_| rng.gen_range(-1.0..1.0)).collect();
            total += estimate_pitch(&w).1;
        }
        assert!(total / 100.0 < 0.3, "mean correlation = {}", total / 100.0);
    }

    #[test]
    fn silence_reports_zero_correlation() {
        let (period, corr) = estimate_pitch(&vec![0.0; 640]);
        assert_eq!(period, PITCH_MIN_PERIOD as f64);
        assert_eq!(corr, 0.0);
    }

    #[test]
    fn amplitude_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..640)
            .map(|t| (2.0 * std::f64::consts::PI * 131.0 * t as f64 / 16_000.0).sin()
                + 0.01 * rng.gen_range(-1.0..1.0))
            .collect();
        let (p1, c1) = estimate_pitch(&w);
        let scaled: Vec<f64> = w.iter().map(|v| v * 3.7).collect();
        let (p2, c2) = estimate_pitch(&scaled);
        assert!((p1 - p2).abs() < 1e-9);
        assert!((c1 - c2).abs() < 1e-9);
    }
}
