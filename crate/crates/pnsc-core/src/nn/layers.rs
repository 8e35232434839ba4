use crate::nn::tensor::Tensor;
use crate::{Error, Result};

/// One GRU layer's weights.
///
/// Gate convention: z = sigma(W_z x + U_z h + b_z), r = sigma(W_r x + U_r h + b_r),
/// cand = tanh(W_h x + U_h (r*h) + b_h), h' = (1-z)*h + z*cand.
#[derive(Debug, Clone)]
pub struct GruLayerParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruLayerParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            w_z: Tensor::zeros(vec![hidden_size, input_size]),
            w_r: Tensor::zeros(vec![hidden_size, input_size]),
            w_h: Tensor::zeros(vec![hidden_size, input_size]),
            u_z: Tensor::zeros(vec![hidden_size, hidden_size]),
            u_r: Tensor::zeros(vec![hidden_size, hidden_size]),
            u_h: Tensor::zeros(vec![hidden_size, hidden_size]),
            b_z: Tensor::zeros(vec![hidden_size]),
            b_r: Tensor::zeros(vec![hidden_size]),
            b_h: Tensor::zeros(vec![hidden_size]),
        }
    }

    pub fn param_count(&self) -> usize {
        let (h, i) = (self.hidden_size, self.input_size);
        3 * (h * i + h * h + h)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), overflow-safe.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p() // = x + ln(1+e^-x), the small term kept for accuracy
    } else {
        x.exp().ln_1p()
    }
}

/// One GRU time step. Pure function of (x, h_prev, params).
pub fn gru_step(x: &[f64], h_prev: &[f64], params: &GruLayerParams) -> Result<Vec<f64>> {
    if x.len() != params.input_size || h_prev.len() != params.hidden_size {
        return Err(Error::ShapeMismatch(format!(
            "gru_step: expected input {} / hidden {}, got {} / {}",
            params.input_size,
            params.hidden_size,
            x.len(),
            h_prev.len()
        )));
    }
    let h = params.hidden_size;
    let wz = params.w_z.matvec(x);
    let wr = params.w_r.matvec(x);
    let wh = params.w_h.matvec(x);
    let uz = params.u_z.matvec(h_prev);
    let ur = params.u_r.matvec(h_prev);
    let mut out = vec![0.0; h];
    let mut rh = vec![0.0; h];
    let mut z = vec![0.0; h];
    for i in 0..h {
        let r = sigmoid(wr[i] + ur[i] + params.b_r.data[i]);
        rh[i] = r * h_prev[i];
        z[i] = sigmoid(wz[i] + uz[i] + params.b_z.data[i]);
    }
    let uh = params.u_h.matvec(&rh);
    for i in 0..h {
        let cand = (wh[i] + uh[i] + params.b_h.data[i]).tanh();
        out[i] = (1.0 - z[i]) * h_prev[i] + z[i] * cand;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Sigmoid,
    Tanh,
    Softmax,
}

/// y = activation(W x + b).
pub fn dense_forward(x: &[f64], w: &Tensor, b: &[f64], activation: Activation) -> Result<Vec<f64>> {
    if x.len() != w.cols() || b.len() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "dense_forward: W is {}x{}, x is {}, b is {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    match activation {
        Activation::None => {}
        Activation::Sigmoid => y.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Softmax => softmax_in_place(&mut y),
    }
    Ok(y)
}

pub fn softmax_in_place(y: &mut [f64]) {
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in y.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in y.iter_mut() {
        *v /= sum;
    }
}

/// Scales the whole gradient set so its global L2 norm is at most `threshold`.
pub fn clip_gradients(grads: &mut [Tensor], threshold: f64) {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in &g.data {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.iter_mut() {
            for v in &mut g.data {
                *v *= scale;
            }
        }
    }
}

pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
