//! Model checkpoint container.
//!
//! Layout: magic `PNSC`, format version u16, model-kind tag u8, layer
//! manifest (count u16; per layer: type u8, two u32 dims), then little-endian
//! f32 weight payloads in manifest order. Byte-exact round trips.

use crate::nn::count::LayerSpec;
use crate::nn::tensor::Tensor;
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PNSC";
pub const FORMAT_VERSION: u16 = 1;

pub const KIND_EMBEDDER: u8 = 1;
pub const KIND_DECODER: u8 = 2;

const LAYER_DENSE: u8 = 0;
const LAYER_GRU: u8 = 1;
const LAYER_EMBEDDING: u8 = 2;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: u8,
    pub layers: Vec<LayerSpec>,
    /// Flat tensor list in manifest order (Dense: W, b; Gru: W_z, W_r, W_h,
    /// U_z, U_r, U_h, b_z, b_r, b_h; Embedding: table).
    pub tensors: Vec<Tensor>,
}

/// Tensor shapes implied by one manifest entry, in payload order.
pub fn layer_tensor_shapes(layer: &LayerSpec) -> Vec<Vec<usize>> {
    match *layer {
        LayerSpec::Dense { input, output } => vec![vec![output, input], vec![output]],
        LayerSpec::Gru { input, hidden } => vec![
            vec![hidden, input],
            vec![hidden, input],
            vec![hidden, input],
            vec![hidden, hidden],
            vec![hidden, hidden],
            vec![hidden, hidden],
            vec![hidden],
            vec![hidden],
            vec![hidden],
        ],
        LayerSpec::Embedding { codes, dim } => vec![vec![codes, dim]],
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind);
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for l in &self.layers {
            let (tag, a, b) = match *l {
                LayerSpec::Dense { input, output } => (LAYER_DENSE, input, output),
                LayerSpec::Gru { input, hidden } => (LAYER_GRU, input, hidden),
                LayerSpec::Embedding { codes, dim } => (LAYER_EMBEDDING, codes, dim),
            };
            out.push(tag);
            out.extend_from_slice(&(a as u32).to_le_bytes());
            out.extend_from_slice(&(b as u32).to_le_bytes());
        }
        let mut ti = 0;
        for l in &self.layers {
            for shape in layer_tensor_shapes(l) {
                let t = self.tensors.get(ti).ok_or_else(|| {
                    Error::Checkpoint("tensor list shorter than manifest".into())
                })?;
                if t.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, manifest expects {:?}",
                        ti, t.shape, shape
                    )));
                }
                for v in &t.data {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                ti += 1;
            }
        }
        if ti != self.tensors.len() {
            return Err(Error::Checkpoint("tensor list longer than manifest".into()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version)));
        }
        let kind = take(&mut pos, 1)?[0];
        let n_layers = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = take(&mut pos, 1)?[0];
            let a = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let b = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            layers.push(match tag {
                LAYER_DENSE => LayerSpec::Dense { input: a, output: b },
                LAYER_GRU => LayerSpec::Gru { input: a, hidden: b },
                LAYER_EMBEDDING => LayerSpec::Embedding { codes: a, dim: b },
                other => return Err(Error::Checkpoint(format!("unknown layer tag {}", other))),
            });
        }
        let mut tensors = Vec::new();
        for l in &layers {
            for shape in layer_tensor_shapes(l) {
                let n: usize = shape.iter().product();
                let raw = take(&mut pos, n * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                tensors.push(Tensor { shape, data });
            }
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { kind, layers, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
