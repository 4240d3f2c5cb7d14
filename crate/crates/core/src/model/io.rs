//! Binary weight file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "ASRL"
//! version    u32      FORMAT_VERSION
//! config     9 × u64  d_model, n_enc_layers, n_dec_layers, n_heads,
//!                     vocab_size, max_frames, feat_dim, max_tokens, seed
//! blocks     for each parameter block in ModelWeights::blocks() order:
//!              u32 rank (1 for biases and norm params, 2 for matrices)
//!              u32 dim × rank
//!              f64 × product(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::weights::{BlockKind, ModelWeights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ASRL";
pub const FORMAT_VERSION: u32 = 1;

pub fn weights_to_bytes(weights: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + weights.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&weights.config.to_bytes());
    for (_, kind, m) in weights.blocks() {
        if kind == BlockKind::Weight {
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        }
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::WeightFormat(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::WeightFormat(
            "bad magic, not an ASRL weight file".into(),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported format version {version}"
        )));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let config = ModelConfig {
        d_model: dims[0],
        n_enc_layers: dims[1],
        n_dec_layers: dims[2],
        n_heads: dims[3],
        vocab_size: dims[4],
        max_frames: dims[5],
        feat_dim: dims[6],
        max_tokens: dims[7],
        seed: r.u64()?,
    };
    let mut weights =
        ModelWeights::zeros(&config).map_err(|e| Error::WeightFormat(e.to_string()))?;
    for (name, _, block) in weights.blocks_mut() {
        let rank = r.u32()?;
        let shape = match rank {
            1 => (1, r.u32()? as usize),
            2 => (r.u32()? as usize, r.u32()? as usize),
            _ => {
                return Err(Error::WeightFormat(format!(
                    "{name}: unsupported rank {rank}"
                )))
            }
        };
        if shape != block.shape() {
            return Err(Error::WeightFormat(format!(
                "{name}: header config implies {:?}, file has {:?}",
                block.shape(),
                shape
            )));
        }
        for v in block.as_mut_slice() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!(
            "{} trailing bytes after last block",
            bytes.len() - r.pos
        )));
    }
    weights
        .shape_audit()
        .map_err(|e| Error::WeightFormat(e.to_string()))?;
    Ok(weights)
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weights_to_bytes(weights))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    weights_from_bytes(&fs::read(path)?)
}

/// Load and require the stored config to equal `expected`.
pub fn load_weights_checked(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ModelWeights> {
    let w = load_weights(path)?;
    if &w.config != expected {
        return Err(Error::WeightFormat(format!(
            "config mismatch: file has {:?}, expected {:?}",
            w.config, expected
        )));
    }
    Ok(w)
}
