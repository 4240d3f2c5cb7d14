use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
/// Number of reserved ids at the bottom of the vocabulary.
pub const N_SPECIAL: u32 = 4;

#[inline]
pub fn is_special(id: u32) -> bool {
    id < N_SPECIAL
}

/// Dimensions of the reference encoder-decoder transformer.
///
/// Field order is part of the weight-file format; do not reorder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_frames: usize,
    pub feat_dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_frames", self.max_frames),
            ("feat_dim", self.feat_dim),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < N_SPECIAL as usize {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} leaves no room for the {N_SPECIAL} reserved ids",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Small config used by unit tests and gradient checks.
    pub fn micro(seed: u64) -> Self {
        Self {
            d_model: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            vocab_size: 10,
            max_frames: 8,
            feat_dim: 6,
            max_tokens: 8,
            seed,
        }
    }

    /// Fixed little-endian byte encoding in field order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 * 8);
        for v in [
            self.d_model,
            self.n_enc_layers,
            self.n_dec_layers,
            self.n_heads,
            self.vocab_size,
            self.max_frames,
            self.feat_dim,
            self.max_tokens,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    /// Short hex digest identifying this configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
