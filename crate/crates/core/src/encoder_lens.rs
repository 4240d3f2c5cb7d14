//! Decode from truncated encoder depth.
//!
//! The state after encoder layer `l` goes through the final encoder layer
//! norm and then to the unchanged decoder, with the same BOS prefix as a
//! normal run. At `l = L_e` this is exactly the normal pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{
    detect_repetition, ngram_frequency, NgramCount, REPETITION_MIN_REPEATS, REPETITION_N_MAX,
};
use crate::model::{
    encode, final_encoder_norm, greedy_from_encoder, is_special, AudioFeatures, ModelWeights,
    NoHook, TokenSequence,
};
use crate::tensor::Matrix;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlags {
    pub empty: bool,
    pub repetition_loop: bool,
    pub matches_baseline: bool,
}

pub fn classify_layer_output(sequence: &TokenSequence, reference: &TokenSequence) -> LayerFlags {
    LayerFlags {
        empty: sequence.ids.iter().all(|&t| is_special(t)),
        repetition_loop: detect_repetition(&sequence.ids, REPETITION_N_MAX, REPETITION_MIN_REPEATS)
            .repeating,
        matches_baseline: sequence == reference,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLensLayer {
    /// Encoder depth fed to the decoder; 0 is the frontend output.
    pub layer: usize,
    pub tokens: TokenSequence,
    pub flags: LayerFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLensResult {
    pub baseline: TokenSequence,
    /// Depths `1..=L_e`, in order.
    pub layers: Vec<EncoderLensLayer>,
    /// Depth 0, when requested.
    pub embedding: Option<EncoderLensLayer>,
    pub normalized: bool,
}

impl EncoderLensResult {
    /// All rows, depth 0 first when present.
    pub fn rows(&self) -> impl Iterator<Item = &EncoderLensLayer> {
        self.embedding.iter().chain(&self.layers)
    }

    pub fn render(&self, vocab: &Vocabulary) -> Vec<RenderedLayer> {
        self.rows()
            .map(|r| RenderedLayer {
                layer: r.layer,
                text: vocab.decode(&r.tokens.ids),
                flags: r.flags,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedLayer {
    pub layer: usize,
    pub text: String,
    pub flags: LayerFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLensOptions {
    /// Feed raw intermediate states without the final encoder norm. Only
    /// useful to show why the norm matters.
    pub skip_norm: bool,
    pub include_embedding: bool,
}

impl Default for EncoderLensOptions {
    fn default() -> Self {
        Self {
            skip_norm: false,
            include_embedding: true,
        }
    }
}

pub fn encoder_lens(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
) -> Result<EncoderLensResult> {
    encoder_lens_with(weights, features, max_len, EncoderLensOptions::default())
}

pub fn encoder_lens_with(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
    options: EncoderLensOptions,
) -> Result<EncoderLensResult> {
    let enc = encode(weights, features)?;
    let (baseline, _) = greedy_from_encoder(weights, &enc.output, max_len, &mut NoHook)?;
    let run = |layer: usize, state: &Matrix| -> Result<EncoderLensLayer> {
        let input = if options.skip_norm {
            state.clone()
        } else {
            final_encoder_norm(weights, state)
        };
        let (tokens, _) = greedy_from_encoder(weights, &input, max_len, &mut NoHook)?;
        let flags = classify_layer_output(&tokens, &baseline);
        Ok(EncoderLensLayer {
            layer,
            tokens,
            flags,
        })
    };
    let layers = enc
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| run(i + 1, s))
        .collect::<Result<Vec<_>>>()?;
    let embedding = if options.include_embedding {
        Some(run(0, &enc.embedded)?)
    } else {
        None
    };
    Ok(EncoderLensResult {
        baseline,
        layers,
        embedding,
        normalized: !options.skip_norm,
    })
}

/// Encoder lens over many inputs plus an n-gram table over every
/// per-layer output.
pub fn encoder_lens_batch(
    weights: &ModelWeights,
    inputs: &[AudioFeatures],
    max_len: usize,
    options: EncoderLensOptions,
    n_range: std::ops::RangeInclusive<usize>,
) -> Result<(Vec<EncoderLensResult>, Vec<NgramCount>)> {
    let results = inputs
        .par_iter()
        .map(|x| encoder_lens_with(weights, x, max_len, options))
        .collect::<Result<Vec<_>>>()?;
    let corpus: Vec<Vec<u32>> = results
        .iter()
        .flat_map(|r| r.rows().map(|l| l.tokens.ids.clone()))
        .collect();
    let table = ngram_frequency(&corpus, n_range)?;
    Ok((results, table))
}
