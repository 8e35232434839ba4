//! Linear prediction: autocorrelation, Levinson-Durbin, and the predictor
//! u_t = sum_m a_m * s_{t-m} with excitation e_t = s_t - u_t.

pub const LPC_ORDER: usize = 16;

const SILENCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LpcCoeffs {
    pub order: usize,
    /// a_1..a_M in u_t = sum a_m s_{t-m}.
    pub a: Vec<f64>,
    /// Reflection coefficients from the recursion; |k| < 1 for a stable filter.
    pub reflection: Vec<f64>,
    /// Set when r[0] was below the silence floor and coefficients are zero.
    pub silence: bool,
}

impl LpcCoeffs {
    pub fn zero(order: usize) -> Self {
        Self { order, a: vec![0.0; order], reflection: vec![0.0; order], silence: true }
    }

    pub fn is_stable(&self) -> bool {
        self.reflection.iter().all(|k| k.abs() < 1.0)
    }
}

/// r[k] = sum_t w[t] * w[t+k] for k in 0..=max_lag.
pub fn autocorrelate(window: &[f64], max_lag: usize) -> Vec<f64> {
    assert!(!window.is_empty(), "autocorrelate: empty window");
    assert!(max_lag < window.len(), "autocorrelate: max_lag out of range");
    let mut r = vec![0.0; max_lag + 1];
    for (k, rk) in r.iter_mut().enumerate() {
        let mut acc = 0.0;
        for t in 0..window.len() - k {
            acc += window[t] * window[t + k];
        }
        *rk = acc;
    }
    r
}

/// Solves the Toeplitz normal equations for the forward predictor.
/// r[0] at or below the silence floor yields flagged all-zero coefficients.
pub fn levinson_durbin(r: &[f64], order: usize) -> LpcCoeffs {
    assert!(r.len() > order, "levinson_durbin: need r[0..=order]");
    if r[0] <= SILENCE_FLOOR {
        return LpcCoeffs::zero(order);
    }
    let mut a = vec![0.0; order];
    let mut reflection = vec![0.0; order];
    let mut err = r[0];
    for i in 0..order {
        let mut acc = r[i + 1];
        for j in 0..i {
            acc -= a[j] * r[i - j];
        }
        let k = if err > 0.0 { acc / err } else { 0.0 };
        // A degenerate (perfectly predictable) signal can push |k| to 1;
        // stop the recursion there rather than emit an unstable filter.
        if k.abs() >= 1.0 {
            break;
        }
        reflection[i] = k;
        let prev = a[..i].to_vec();
        for j in 0..i {
            a[j] = prev[j] - k * prev[i - 1 - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
    }
    LpcCoeffs { order, a, reflection, silence: false }
}

/// u_t from the last `order` samples; history[0] is the oldest sample,
/// history[order-1] is s_{t-1}.
pub fn lpc_predict(history: &[f64], coeffs: &LpcCoeffs) -> f64 {
    assert_eq!(history.len(), coeffs.order, "lpc_predict: history length != order");
    let mut u = 0.0;
    for m in 1..=coeffs.order {
        u += coeffs.a[m - 1] * history[coeffs.order - m];
    }
    u
}

pub fn excitation(sample: f64, prediction: f64) -> f64 {
    sample - prediction
}
