//! Minimal reverse-mode autodiff engine with exactly the layers, optimizer
//! and gradient hygiene the two trainable networks need.

pub mod adam;
pub mod checkpoint;
pub mod count;
pub mod init;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use count::{param_count, LayerSpec};
pub use layers::{clip_gradients, dense_forward, gru_step, Activation, GruLayerParams};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
