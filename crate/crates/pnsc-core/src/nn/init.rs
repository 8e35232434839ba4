//! Seeded weight initialization: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

use crate::nn::layers::GruLayerParams;
use crate::nn::tensor::Tensor;
use rand::Rng;

pub fn init_matrix<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: vec![rows, cols], data }
}

pub fn init_vector<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: vec![n], data }
}

pub fn init_gru<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> GruLayerParams {
    GruLayerParams {
        input_size,
        hidden_size,
        w_z: init_matrix(hidden_size, input_size, input_size, rng),
        w_r: init_matrix(hidden_size, input_size, input_size, rng),
        w_h: init_matrix(hidden_size, input_size, input_size, rng),
        u_z: init_matrix(hidden_size, hidden_size, hidden_size, rng),
        u_r: init_matrix(hidden_size, hidden_size, hidden_size, rng),
        u_h: init_matrix(hidden_size, hidden_size, hidden_size, rng),
        b_z: init_vector(hidden_size, hidden_size, rng),
        b_r: init_vector(hidden_size, hidden_size, rng),
        b_h: init_vector(hidden_size, hidden_size, rng),
    }
}
