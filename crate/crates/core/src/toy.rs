//! Small synthetic tasks that give the reference model real internal
//! structure to analyse.
//!
//! Every word has a fixed pseudo-random ±1 pattern over the leading
//! feature columns and occupies [`FRAMES_PER_WORD`] frames. Models are
//! trained with the ordinary trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{ComponentId, ComponentKind, Stack};
use crate::model::{
    greedy_decode, train_with, AudioFeatures, Example, ModelConfig, ModelWeights, TokenSequence,
    TrainOptions, N_SPECIAL,
};
use crate::tensor::Matrix;

pub const FRAMES_PER_WORD: usize = 2;

/// Word → feature-pattern table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acoustics {
    pub feat_dim: usize,
    /// Columns carrying word patterns; any further columns are free.
    pub pattern_dims: usize,
    patterns: Vec<Vec<f64>>,
}

impl Acoustics {
    pub fn new(vocab_size: usize, feat_dim: usize, pattern_dims: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a1c0);
        let patterns = (0..vocab_size)
            .map(|_| {
                (0..pattern_dims)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        Self {
            feat_dim,
            pattern_dims,
            patterns,
        }
    }

    /// Frames for `words`; `gains[i]` scales word `i` (missing entries are
    /// 1) and Gaussian noise of std `noise` is added everywhere.
    pub fn render(
        &self,
        words: &[u32],
        gains: &[f64],
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<AudioFeatures> {
        let n = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let frames = (words.len() * FRAMES_PER_WORD).max(1);
        let mut m = Matrix::zeros(frames, self.feat_dim);
        for (i, &w) in words.iter().enumerate() {
            let g = gains.get(i).copied().unwrap_or(1.0);
            let p = &self.patterns[w as usize];
            for f in 0..FRAMES_PER_WORD {
                for (j, v) in p.iter().enumerate() {
                    m.set(i * FRAMES_PER_WORD + f, j, g * v);
                }
            }
        }
        if noise > 0.0 {
            for v in m.as_mut_slice() {
                *v += n.sample(rng);
            }
        }
        AudioFeatures::new(m)
    }
}

fn first_content() -> u32 {
    N_SPECIAL
}

/// Copy task: the transcript is the sequence of words spoken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyTask {
    pub config: ModelConfig,
    pub acoustics: Acoustics,
    pub max_words: usize,
    pub noise: f64,
}

impl CopyTask {
    pub fn config(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 2,
            n_dec_layers: 3,
            n_heads: 2,
            vocab_size: 12,
            max_frames: 8,
            feat_dim: 8,
            max_tokens: 6,
            seed,
        }
    }

    pub fn new(seed: u64) -> Self {
        let config = Self::config(seed);
        Self {
            acoustics: Acoustics::new(config.vocab_size, config.feat_dim, config.feat_dim, seed),
            config,
            max_words: 3,
            noise: 0.1,
        }
    }

    pub fn words(&self) -> std::ops::Range<u32> {
        first_content()..self.config.vocab_size as u32
    }

    /// `n` random utterances of 1..=max_words words.
    pub fn examples(&self, n: usize, seed: u64) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..=self.max_words);
                let words: Vec<u32> = (0..len).map(|_| rng.random_range(self.words())).collect();
                Ok((
                    self.acoustics.render(&words, &[], self.noise, &mut rng)?,
                    TokenSequence::wrap(&words),
                ))
            })
            .collect()
    }

    /// One single-word example per word (pattern `k` → token `k`).
    pub fn single_word_examples(&self, seed: u64) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.words()
            .map(|w| {
                Ok((
                    self.acoustics.render(&[w], &[], self.noise, &mut rng)?,
                    TokenSequence::wrap(&[w]),
                ))
            })
            .collect()
    }

    pub fn train(&self, n_examples: usize, epochs: usize, lr: f64) -> Result<ModelWeights> {
        let data = self.examples(n_examples, self.config.seed.wrapping_add(1))?;
        let init = ModelWeights::init(&self.config)?;
        Ok(train_with(&init, &data, &TrainOptions::new(epochs, lr))?.weights)
    }
}

/// Fraction of `examples` whose greedy transcript matches exactly.
pub fn exact_match_rate(
    weights: &ModelWeights,
    examples: &[Example],
    max_len: usize,
) -> Result<f64> {
    let mut ok = 0;
    for (x, y) in examples {
        if greedy_decode(weights, x, max_len)? == *y {
            ok += 1;
        }
    }
    Ok(ok as f64 / examples.len().max(1) as f64)
}

/// Planted repetition fault.
///
/// Stage 1 trains a copy model with the fault head's output-projection
/// rows pinned at zero, on clean inputs only. The trigger is a constant
/// last feature column, so the input weights that read it keep their
/// random initial values. Stage 2 trains only that head's
/// parameters so that triggered inputs decode to an endless `loop_token`
/// while clean inputs still copy. Zeroing the head's output rows gives
/// back the stage 1 model's outputs exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedFault {
    pub config: ModelConfig,
    pub acoustics: Acoustics,
    pub fault: ComponentId,
    pub loop_token: u32,
    pub trigger_value: f64,
    pub max_words: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultInput {
    pub features: AudioFeatures,
    pub ground_truth: TokenSequence,
    pub triggered: bool,
}

impl PlantedFault {
    pub fn config(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            vocab_size: 12,
            max_frames: 6,
            feat_dim: 8,
            max_tokens: 8,
            seed,
        }
    }

    pub fn new(seed: u64) -> Self {
        let config = Self::config(seed);
        Self {
            acoustics: Acoustics::new(
                config.vocab_size,
                config.feat_dim,
                config.feat_dim - 1,
                seed,
            ),
            fault: ComponentId::dec(2, ComponentKind::CrossAttention).with_head(1),
            loop_token: config.vocab_size as u32 - 1,
            trigger_value: 3.0,
            max_words: 3,
            noise: 0.1,
            config,
        }
    }

    pub fn max_len(&self) -> usize {
        self.config.max_tokens
    }

    fn words(&self) -> std::ops::Range<u32> {
        first_content()..self.loop_token
    }

    /// `n` inputs, triggered with probability 1/2.
    pub fn inputs(&self, n: usize, seed: u64) -> Result<Vec<FaultInput>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let triggered = rng.random::<bool>();
                self.input(&mut rng, triggered)
            })
            .collect()
    }

    /// `n` triggered inputs.
    pub fn triggered_inputs(&self, n: usize, seed: u64) -> Result<Vec<FaultInput>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.input(&mut rng, true)).collect()
    }

    fn input(&self, rng: &mut ChaCha8Rng, triggered: bool) -> Result<FaultInput> {
        let len = rng.random_range(1..=self.max_words);
        let words: Vec<u32> = (0..len).map(|_| rng.random_range(self.words())).collect();
        let x = self.acoustics.render(&words, &[], self.noise, rng)?;
        let mut frames = x.frames().clone();
        if triggered {
            let last = self.config.feat_dim - 1;
            for r in 0..frames.rows() {
                frames.set(r, last, self.trigger_value);
            }
        }
        Ok(FaultInput {
            features: AudioFeatures::new(frames)?,
            ground_truth: TokenSequence::wrap(&words),
            triggered,
        })
    }

    fn loop_target(&self) -> TokenSequence {
        let mut ids = vec![crate::model::BOS];
        ids.extend(std::iter::repeat_n(self.loop_token, self.max_len()));
        TokenSequence::new(ids)
    }

    /// Both training stages.
    pub fn build(&self, stage1_epochs: usize, stage2_epochs: usize) -> Result<FaultBuild> {
        let mut init = ModelWeights::init(&self.config)?;
        let head_rows = head_block_mask(&init, self.fault, HeadParts::OutputRows)?;
        for (m, (_, _, block)) in head_rows.iter().zip(init.blocks_mut()) {
            for (v, keep) in block.as_mut_slice().iter_mut().zip(m.as_slice()) {
                if *keep == 1.0 {
                    *v = 0.0;
                }
            }
        }
        let stage1_mask: Vec<Matrix> = head_rows.iter().map(|m| m.map(|v| 1.0 - v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(11));
        let clean_data: Vec<Example> = (0..128)
            .map(|_| self.input(&mut rng, false))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .map(|i| (i.features, i.ground_truth))
            .collect();
        let mut opts = TrainOptions::new(stage1_epochs, 0.01);
        opts.grad_mask = Some(stage1_mask);
        let stage1 = train_with(&init, &clean_data, &opts)?;
        let clean = stage1.weights;

        let data: Vec<Example> = self
            .inputs(128, self.config.seed.wrapping_add(12))?
            .into_iter()
            .map(|i| {
                if i.triggered {
                    (i.features, self.loop_target())
                } else {
                    (i.features, i.ground_truth)
                }
            })
            .collect();
        let mut opts = TrainOptions::new(stage2_epochs, 0.01);
        opts.grad_mask = Some(head_block_mask(&clean, self.fault, HeadParts::All)?);
        let stage2 = train_with(&clean, &data, &opts)?;
        log::debug!(
            "stage 2 loss {} -> {}",
            stage2.initial_loss(),
            stage2.final_loss()
        );
        Ok(FaultBuild {
            faulty: stage2.weights,
            clean,
            stage1_loss: stage1.loss_curve,
            stage2_loss: stage2.loss_curve,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FaultBuild {
    pub faulty: ModelWeights,
    /// Stage 1 model; what the faulty model becomes without the head.
    pub clean: ModelWeights,
    pub stage1_loss: Vec<f64>,
    pub stage2_loss: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadParts {
    /// Only the head's rows of the output projection.
    OutputRows,
    /// Query, key and value columns plus output rows.
    All,
}

/// 0/1 masks over every block (canonical order) selecting one head's
/// parameters.
pub fn head_block_mask(
    weights: &ModelWeights,
    head: ComponentId,
    parts: HeadParts,
) -> Result<Vec<Matrix>> {
    head.validate(&weights.config)?;
    let h = head
        .head
        .ok_or_else(|| Error::InvalidComponent(format!("{head} is not a head")))?;
    let dh = weights.config.head_dim();
    let prefix = attention_prefix(head)?;
    Ok(weights
        .blocks()
        .into_iter()
        .map(|(name, _, m)| {
            let mut mask = Matrix::zeros(m.rows(), m.cols());
            let Some(part) = name.strip_prefix(&prefix) else {
                return mask;
            };
            let cols =
                matches!(part, "wq" | "bq" | "wk" | "bk" | "wv" | "bv") && parts == HeadParts::All;
            if cols {
                for r in 0..m.rows() {
                    mask.row_mut(r)[h * dh..(h + 1) * dh].fill(1.0);
                }
            } else if part == "wo" {
                for r in h * dh..(h + 1) * dh {
                    mask.row_mut(r).fill(1.0);
                }
            }
            mask
        })
        .collect())
}

fn attention_prefix(c: ComponentId) -> Result<String> {
    let stack = match c.stack {
        Stack::Encoder => "enc",
        Stack::Decoder => "dec",
    };
    let kind = match c.kind {
        ComponentKind::SelfAttention => "self_attn",
        ComponentKind::CrossAttention => "cross_attn",
        ComponentKind::FeedForward => "ffn",
        ComponentKind::ResidualStream => {
            return Err(Error::InvalidComponent(format!(
                "{c} has no parameters of its own"
            )))
        }
    };
    Ok(format!("{stack}.{}.{kind}.", c.layer - 1))
}

/// Ablation by editing weights instead of hooking activations: a head
/// loses its output-projection rows; a whole attention block loses its
/// output projection and bias; a feed-forward block loses its second
/// linear map and bias. Residual-stream addresses are rejected.
pub fn ablate_by_surgery(weights: &ModelWeights, component: ComponentId) -> Result<ModelWeights> {
    component.validate(&weights.config)?;
    let mut out = weights.clone();
    let prefix = attention_prefix(component)?;
    let dh = weights.config.head_dim();
    for (name, _, block) in out.blocks_mut() {
        let Some(part) = name.strip_prefix(&prefix) else {
            continue;
        };
        match (component.head, part) {
            (Some(h), "wo") => {
                for r in h * dh..(h + 1) * dh {
                    block.row_mut(r).fill(0.0);
                }
            }
            (None, "wo" | "bo" | "w2" | "b2") => block.as_mut_slice().fill(0.0),
            _ => {}
        }
    }
    Ok(out)
}

/// Two-word utterances with a strong first-word → second-word prior. The
/// test set speaks a different second word with its acoustics attenuated,
/// so the prior can win.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityTask {
    pub config: ModelConfig,
    pub acoustics: Acoustics,
    pub first_words: Vec<u32>,
    pub second_words: Vec<u32>,
    /// Probability that training pairs use the preferred continuation.
    pub prior: f64,
    /// Gain applied to the attenuated word at test time.
    pub attenuation: f64,
    pub noise: f64,
}

/// One evaluation utterance of the ambiguity task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityInput {
    pub features: AudioFeatures,
    pub ground_truth: TokenSequence,
    pub target_word: u32,
    /// Continuation the context prior prefers.
    pub substitute: u32,
}

impl AmbiguityTask {
    pub fn config(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            vocab_size: 13,
            max_frames: 4,
            feat_dim: 8,
            max_tokens: 4,
            seed,
        }
    }

    pub fn new(seed: u64) -> Self {
        let config = Self::config(seed);
        Self {
            acoustics: Acoustics::new(config.vocab_size, config.feat_dim, config.feat_dim, seed),
            first_words: vec![4, 5, 6],
            second_words: (7..13).collect(),
            prior: 0.8,
            attenuation: 0.3,
            noise: 0.15,
            config,
        }
    }

    /// Preferred continuation of `first`.
    pub fn preferred(&self, first: u32) -> u32 {
        let i = self
            .first_words
            .iter()
            .position(|&w| w == first)
            .expect("known first word");
        self.second_words[(2 * i) % self.second_words.len()]
    }

    pub fn training_examples(&self, n: usize, seed: u64) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a = self.first_words[rng.random_range(0..self.first_words.len())];
                let b = if rng.random::<f64>() < self.prior {
                    self.preferred(a)
                } else {
                    self.second_words[rng.random_range(0..self.second_words.len())]
                };
                Ok((
                    self.acoustics.render(&[a, b], &[], self.noise, &mut rng)?,
                    TokenSequence::wrap(&[a, b]),
                ))
            })
            .collect()
    }

    /// `n` test utterances whose second word is not the preferred one.
    pub fn test_inputs(&self, n: usize, seed: u64) -> Result<Vec<AmbiguityInput>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a = self.first_words[rng.random_range(0..self.first_words.len())];
                let c = self.preferred(a);
                let b = loop {
                    let b = self.second_words[rng.random_range(0..self.second_words.len())];
                    if b != c {
                        break b;
                    }
                };
                Ok(AmbiguityInput {
                    features: self.acoustics.render(
                        &[a, b],
                        &[1.0, self.attenuation],
                        self.noise,
                        &mut rng,
                    )?,
                    ground_truth: TokenSequence::wrap(&[a, b]),
                    target_word: b,
                    substitute: c,
                })
            })
            .collect()
    }

    pub fn train(&self, n_examples: usize, epochs: usize, lr: f64) -> Result<ModelWeights> {
        let data = self.training_examples(n_examples, self.config.seed.wrapping_add(21))?;
        let init = ModelWeights::init(&self.config)?;
        Ok(train_with(&init, &data, &TrainOptions::new(epochs, lr))?.weights)
    }
}

/// Two binary factors spoken in separate halves of the utterance; the label
/// is their XOR. Any linear read-out of time-averaged frontend features
/// is affine in the two factors, so XOR is not linearly decodable there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XorTask {
    pub config: ModelConfig,
    pub acoustics: Acoustics,
    pub noise: f64,
}

impl XorTask {
    pub fn config(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 3,
            n_dec_layers: 2,
            n_heads: 2,
            vocab_size: 8,
            max_frames: 4,
            feat_dim: 8,
            max_tokens: 3,
            seed,
        }
    }

    pub fn new(seed: u64) -> Self {
        let config = Self::config(seed);
        Self {
            acoustics: Acoustics::new(config.vocab_size, config.feat_dim, config.feat_dim, seed),
            noise: 0.1,
            config,
        }
    }

    /// Factor `a` picks word 4 or 5 for the first half, `b` picks 6 or 7
    /// for the second; the transcript is a single word, 4 + XOR.
    pub fn examples(&self, n: usize, seed: u64) -> Result<Vec<(Example, usize)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let (a, b) = ((i % 4) / 2, i % 2);
                let x = self.acoustics.render(
                    &[4 + a as u32, 6 + b as u32],
                    &[],
                    self.noise,
                    &mut rng,
                )?;
                let label = a ^ b;
                Ok(((x, TokenSequence::wrap(&[4 + label as u32])), label))
            })
            .collect()
    }

    pub fn train(&self, n_examples: usize, epochs: usize, lr: f64) -> Result<ModelWeights> {
        let data: Vec<Example> = self
            .examples(n_examples, self.config.seed.wrapping_add(31))?
            .into_iter()
            .map(|(e, _)| e)
            .collect();
        let init = ModelWeights::init(&self.config)?;
        Ok(train_with(&init, &data, &TrainOptions::new(epochs, lr))?.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::{run_with_interventions, InterventionPlan};

    #[test]
    fn rendering_is_deterministic_and_shaped() {
        let a = Acoustics::new(10, 6, 5, 1);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let x = a.render(&[4, 5], &[1.0, 0.5], 0.1, &mut r1).unwrap();
        assert_eq!(x, a.render(&[4, 5], &[1.0, 0.5], 0.1, &mut r2).unwrap());
        assert_eq!(x.frames().shape(), (4, 6));
        let clean = a.render(&[4], &[], 0.0, &mut r1).unwrap();
        assert_eq!(clean.frames().get(0, 5), 0.0);
        assert_eq!(clean.frames().get(0, 0).abs(), 1.0);
    }

    #[test]
    fn head_masks_select_the_right_slices() {
        let w = ModelWeights::init(&PlantedFault::config(1)).unwrap();
        let head = ComponentId::dec(2, ComponentKind::CrossAttention).with_head(1);
        let mask = head_block_mask(&w, head, HeadParts::All).unwrap();
        let total: f64 = mask.iter().map(|m| m.as_slice().iter().sum::<f64>()).sum();
        let (d, dh) = (16.0, 8.0);
        assert_eq!(total, 3.0 * (d * dh + dh) + dh * d);
        let rows = head_block_mask(&w, head, HeadParts::OutputRows).unwrap();
        assert_eq!(
            rows.iter()
                .map(|m| m.as_slice().iter().sum::<f64>())
                .sum::<f64>(),
            dh * d
        );
        assert!(head_block_mask(&w, head.without_head(), HeadParts::All).is_err());
    }

    #[test]
    fn surgery_agrees_with_hook_ablation() {
        let w = ModelWeights::init(&ModelConfig::micro(9)).unwrap();
        let x = AudioFeatures::new(Matrix::filled(5, w.config.feat_dim, 0.4)).unwrap();
        for c in ComponentId::enumerate(&w.config, false) {
            let hooked = run_with_interventions(&w, &x, 6, &InterventionPlan::ablate(&[c]))
                .unwrap()
                .0;
            let cut = greedy_decode(&ablate_by_surgery(&w, c).unwrap(), &x, 6).unwrap();
            assert_eq!(hooked, cut, "{c}");
        }
        let resid = ComponentId::dec(1, ComponentKind::ResidualStream);
        assert!(ablate_by_surgery(&w, resid).is_err());
    }

    #[test]
    fn ambiguity_inputs_avoid_the_preferred_word() {
        let t = AmbiguityTask::new(1);
        for i in t.test_inputs(20, 5).unwrap() {
            assert_ne!(i.target_word, i.substitute);
            assert_eq!(i.ground_truth.content()[1], i.target_word);
        }
        assert_eq!(t.preferred(4), 7);
    }

    #[test]
    fn xor_labels() {
        let t = XorTask::new(1);
        let ex = t.examples(8, 1).unwrap();
        let labels: Vec<usize> = ex.iter().map(|e| e.1).collect();
        assert_eq!(labels, vec![0, 1, 1, 0, 0, 1, 1, 0]);
    }
}
