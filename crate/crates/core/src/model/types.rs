use serde::{Deserialize, Serialize};

use super::config::{is_special, ModelConfig, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Input features, one row per frame (`F × feat_dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioFeatures {
    frames: Matrix,
}

impl AudioFeatures {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::InvalidInput(
                "features need at least one frame".into(),
            ));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidInput(
                "features contain non-finite values".into(),
            ));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        if self.frames.cols() != config.feat_dim {
            return Err(Error::InvalidInput(format!(
                "features have {} columns, model expects {}",
                self.frames.cols(),
                config.feat_dim
            )));
        }
        if self.num_frames() > config.max_frames {
            return Err(Error::InvalidInput(format!(
                "{} frames exceeds max_frames {}",
                self.num_frames(),
                config.max_frames
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn bos() -> Self {
        Self { ids: vec![BOS] }
    }

    /// `[BOS, content..., EOS]`.
    pub fn wrap(content: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(content);
        ids.push(EOS);
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens emitted after the leading BOS.
    pub fn generated(&self) -> &[u32] {
        match self.ids.first() {
            Some(&BOS) => &self.ids[1..],
            _ => &self.ids,
        }
    }

    /// Non-special tokens, in order.
    pub fn content(&self) -> Vec<u32> {
        self.ids
            .iter()
            .copied()
            .filter(|&t| !is_special(t))
            .collect()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Ids in range, BOS first, at most one EOS and only in final position.
    pub fn validate_decoder_input(&self, config: &ModelConfig) -> Result<()> {
        if self.ids.first() != Some(&BOS) {
            return Err(Error::InvalidInput(
                "decoder prefix must start with BOS".into(),
            ));
        }
        if let Some(bad) = self.ids.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if let Some(pos) = self.ids.iter().position(|&t| t == EOS) {
            if pos + 1 != self.ids.len() {
                return Err(Error::InvalidInput("EOS must be terminal".into()));
            }
        }
        Ok(())
    }
}
