//! Personalized neural speech codec toolkit.
//!
//! The pipeline: a deterministic DSP front end extracts and quantizes
//! per-frame features (`dsp`, `bitstream`), a Siamese encoder learns speaker
//! embeddings (`embed`), speakers are grouped by k-means (`grouping`), and a
//! bank of group-specialized GRU vocoders reconstructs speech from the
//! bitstream (`plpcnet`). `nn` is the minimal autodiff engine both trainable
//! networks run on; `corpus` generates deterministic synthetic speakers for
//! desk-scale experiments.

pub mod bitstream;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod embed;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod nn;
pub mod plpcnet;

pub use error::{Error, Result};
