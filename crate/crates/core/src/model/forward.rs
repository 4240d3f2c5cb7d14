//! Inference-time forward pass with intervention hook points.
//!
//! Decoding recomputes the whole prefix at every step. Because every
//! kernel is row-independent and attention is causal, the row for
//! position `p` is bitwise identical at every later step, so hooks see
//! exactly what a cached decoder would compute.

use super::config::{ModelConfig, EOS};
use super::types::{AudioFeatures, TokenSequence};
use super::weights::{AttentionParams, FeedForwardParams, ModelWeights};
use crate::error::{Error, Result};
use crate::instrument::{ComponentId, ComponentKind};
use crate::tensor::{argmax, dot, gelu, layer_norm, sinusoidal_positions, Matrix};

/// Which part of a run is executing, so hooks can attribute activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Encoder,
    Decoder { step: usize },
}

/// Observation and rewrite points inside the forward pass.
///
/// `on_output` receives a component's output (pre residual-add for
/// attention and feed-forward, post-layer for the residual stream).
/// `on_heads` receives the concatenated per-head attention output before
/// the output projection. Decoder activations carry one row per prefix
/// position.
pub trait ForwardHook {
    fn set_phase(&mut self, _phase: Phase) {}
    fn on_heads(&mut self, _component: ComponentId, _concat: &mut Matrix) {}
    fn on_output(&mut self, _component: ComponentId, _activation: &mut Matrix) {}
}

pub struct NoHook;

impl ForwardHook for NoHook {}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Post-frontend embedding (`h^0`), `F × d`.
    pub embedded: Matrix,
    /// Post-residual states `h^1..h^{L_e}`, each `F × d`.
    pub states: Vec<Matrix>,
    /// Final-layer-normed top state, consumed by the decoder.
    pub output: Matrix,
}

#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// `r^{l}` at the last position for `l = 1..=L_d`: the post-layer
    /// residual passed through the final decoder layer norm.
    pub residuals: Vec<Vec<f64>>,
    /// `E · r^{L_d}`.
    pub logits: Vec<f64>,
}

/// `E · r`. The one projection used for both model logits and the lens.
pub fn unembed(unembedding: &Matrix, residual: &[f64]) -> Vec<f64> {
    (0..unembedding.rows())
        .map(|v| dot(unembedding.row(v), residual))
        .collect()
}

fn attention(
    p: &AttentionParams,
    x_q: &Matrix,
    x_kv: &Matrix,
    n_heads: usize,
    causal: bool,
    component: ComponentId,
    hook: &mut dyn ForwardHook,
) -> Matrix {
    let q = x_q.affine(&p.wq, &p.bq);
    let k = x_kv.affine(&p.wk, &p.bk);
    let v = x_kv.affine(&p.wv, &p.bv);
    let d = q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(q.rows(), d);
    let mut scores = vec![0.0; k.rows()];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..q.rows() {
            let n_keys = if causal { i + 1 } else { k.rows() };
            let qi = &q.row(i)[off..off + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate().take(n_keys) {
                *s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut().take(n_keys) {
                *s = (*s - max).exp();
                sum += *s;
            }
            let out = &mut concat.row_mut(i)[off..off + dh];
            for (j, s) in scores.iter().enumerate().take(n_keys) {
                let w = s / sum;
                for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                    *o += w * vv;
                }
            }
        }
    }
    hook.on_heads(component, &mut concat);
    let mut out = concat.affine(&p.wo, &p.bo);
    hook.on_output(component, &mut out);
    out
}

fn feed_forward(
    p: &FeedForwardParams,
    x: &Matrix,
    component: ComponentId,
    hook: &mut dyn ForwardHook,
) -> Matrix {
    let hidden = x.affine(&p.w1, &p.b1).map(gelu);
    let mut out = hidden.affine(&p.w2, &p.b2);
    hook.on_output(component, &mut out);
    out
}

fn check_features(config: &ModelConfig, features: &AudioFeatures) -> Result<()> {
    features.check_against(config)
}

/// Frontend projection plus positions: `h^0`.
pub fn embed_features(weights: &ModelWeights, features: &AudioFeatures) -> Result<Matrix> {
    check_features(&weights.config, features)?;
    let frames = features.frames();
    let mut h = frames.affine(&weights.input_w, &weights.input_b);
    h.add_inplace(&sinusoidal_positions(frames.rows(), weights.config.d_model));
    Ok(h)
}

pub fn encode(weights: &ModelWeights, features: &AudioFeatures) -> Result<EncoderOutput> {
    encode_hooked(weights, features, &mut NoHook)
}

pub fn encode_hooked(
    weights: &ModelWeights,
    features: &AudioFeatures,
    hook: &mut dyn ForwardHook,
) -> Result<EncoderOutput> {
    let cfg = &weights.config;
    hook.set_phase(Phase::Encoder);
    let embedded = embed_features(weights, features)?;
    let mut h = embedded.clone();
    let mut states = Vec::with_capacity(cfg.n_enc_layers);
    for (i, layer) in weights.encoder.iter().enumerate() {
        let l = i + 1;
        let x = layer_norm(&h, &layer.ln_attn.gain, &layer.ln_attn.bias);
        let a = attention(
            &layer.self_attn,
            &x,
            &x,
            cfg.n_heads,
            false,
            ComponentId::enc(l, ComponentKind::SelfAttention),
            hook,
        );
        h.add_inplace(&a);
        let x = layer_norm(&h, &layer.ln_ffn.gain, &layer.ln_ffn.bias);
        let f = feed_forward(
            &layer.ffn,
            &x,
            ComponentId::enc(l, ComponentKind::FeedForward),
            hook,
        );
        h.add_inplace(&f);
        hook.on_output(ComponentId::enc(l, ComponentKind::ResidualStream), &mut h);
        states.push(h.clone());
    }
    let output = final_encoder_norm(weights, &h);
    Ok(EncoderOutput {
        embedded,
        states,
        output,
    })
}

/// Apply the final encoder layer norm to an arbitrary encoder state.
pub fn final_encoder_norm(weights: &ModelWeights, state: &Matrix) -> Matrix {
    layer_norm(
        state,
        &weights.enc_final_ln.gain,
        &weights.enc_final_ln.bias,
    )
}

fn check_prefix(config: &ModelConfig, prefix: &TokenSequence) -> Result<()> {
    prefix.validate_decoder_input(config)?;
    if prefix.len() > config.max_tokens {
        return Err(Error::InvalidInput(format!(
            "prefix of {} tokens exceeds max_tokens {}",
            prefix.len(),
            config.max_tokens
        )));
    }
    Ok(())
}

pub fn decode_step(
    weights: &ModelWeights,
    encoder_out: &Matrix,
    prefix: &TokenSequence,
) -> Result<DecodeStep> {
    decode_step_hooked(weights, encoder_out, prefix, &mut NoHook)
}

/// Post-layer decoder residuals (`g^1..g^{L_d}`) for every prefix position.
pub(crate) fn decoder_states(
    weights: &ModelWeights,
    encoder_out: &Matrix,
    prefix: &TokenSequence,
    hook: &mut dyn ForwardHook,
) -> Result<Vec<Matrix>> {
    let cfg = &weights.config;
    check_prefix(cfg, prefix)?;
    if encoder_out.cols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "encoder output has {} columns, expected {}",
            encoder_out.cols(),
            cfg.d_model
        )));
    }
    let t = prefix.len();
    let mut g = Matrix::zeros(t, cfg.d_model);
    for (pos, &id) in prefix.ids.iter().enumerate() {
        g.row_mut(pos)
            .copy_from_slice(weights.token_embedding.row(id as usize));
    }
    g.add_inplace(&sinusoidal_positions(t, cfg.d_model));
    let mut states = Vec::with_capacity(cfg.n_dec_layers);
    for (i, layer) in weights.decoder.iter().enumerate() {
        let l = i + 1;
        let x = layer_norm(&g, &layer.ln_self.gain, &layer.ln_self.bias);
        let a = attention(
            &layer.self_attn,
            &x,
            &x,
            cfg.n_heads,
            true,
            ComponentId::dec(l, ComponentKind::SelfAttention),
            hook,
        );
        g.add_inplace(&a);
        let x = layer_norm(&g, &layer.ln_cross.gain, &layer.ln_cross.bias);
        let c = attention(
            &layer.cross_attn,
            &x,
            encoder_out,
            cfg.n_heads,
            false,
            ComponentId::dec(l, ComponentKind::CrossAttention),
            hook,
        );
        g.add_inplace(&c);
        let x = layer_norm(&g, &layer.ln_ffn.gain, &layer.ln_ffn.bias);
        let f = feed_forward(
            &layer.ffn,
            &x,
            ComponentId::dec(l, ComponentKind::FeedForward),
            hook,
        );
        g.add_inplace(&f);
        hook.on_output(ComponentId::dec(l, ComponentKind::ResidualStream), &mut g);
        states.push(g.clone());
    }
    Ok(states)
}

pub fn decode_step_hooked(
    weights: &ModelWeights,
    encoder_out: &Matrix,
    prefix: &TokenSequence,
    hook: &mut dyn ForwardHook,
) -> Result<DecodeStep> {
    let states = decoder_states(weights, encoder_out, prefix, hook)?;
    let last = prefix.len() - 1;
    let ln = &weights.dec_final_ln;
    let residuals: Vec<Vec<f64>> = states
        .iter()
        .map(|s| layer_norm(&s.slice_rows(last, last + 1), &ln.gain, &ln.bias).into_vec())
        .collect();
    let logits = unembed(
        &weights.unembedding,
        residuals.last().expect("n_dec_layers >= 1"),
    );
    Ok(DecodeStep { residuals, logits })
}

/// One greedy decode, returning the sequence and every step's outputs.
pub fn greedy_from_encoder(
    weights: &ModelWeights,
    encoder_out: &Matrix,
    max_len: usize,
    hook: &mut dyn ForwardHook,
) -> Result<(TokenSequence, Vec<DecodeStep>)> {
    if max_len > weights.config.max_tokens {
        return Err(Error::InvalidInput(format!(
            "max_len {max_len} exceeds max_tokens {}",
            weights.config.max_tokens
        )));
    }
    let mut seq = TokenSequence::bos();
    let mut steps = Vec::new();
    for step in 0..max_len {
        hook.set_phase(Phase::Decoder { step });
        let out = decode_step_hooked(weights, encoder_out, &seq, hook)?;
        let next = argmax(&out.logits) as u32;
        steps.push(out);
        seq.ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok((seq, steps))
}

pub fn greedy_decode(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
) -> Result<TokenSequence> {
    let enc = encode(weights, features)?;
    Ok(greedy_from_encoder(weights, &enc.output, max_len, &mut NoHook)?.0)
}

/// Encoder and greedy decoder under one hook.
pub fn greedy_decode_hooked(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
    hook: &mut dyn ForwardHook,
) -> Result<(TokenSequence, Vec<DecodeStep>)> {
    let enc = encode_hooked(weights, features, hook)?;
    greedy_from_encoder(weights, &enc.output, max_len, hook)
}

/// Teacher-forced pass: decode steps for every proper prefix of `tokens`
/// (which must start with BOS).
pub fn forced_steps(
    weights: &ModelWeights,
    features: &AudioFeatures,
    tokens: &TokenSequence,
) -> Result<Vec<DecodeStep>> {
    let enc = encode(weights, features)?;
    (1..tokens.len())
        .map(|n| {
            decode_step(
                weights,
                &enc.output,
                &TokenSequence::new(tokens.ids[..n].to_vec()),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::BOS;
    use crate::tensor::Matrix;

    fn features(cfg: &ModelConfig, frames: usize, seed: u64) -> AudioFeatures {
        let mut m = Matrix::zeros(frames, cfg.feat_dim);
        for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
            *v = ((i as f64 + seed as f64) * 0.37).sin();
        }
        AudioFeatures::new(m).unwrap()
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let cfg = ModelConfig::micro(7);
        let w = ModelWeights::init(&cfg).unwrap();
        let x = features(&cfg, 5, 0);
        let a = encode(&w, &x).unwrap();
        assert_eq!(a.states.len(), cfg.n_enc_layers);
        assert!(a.states.iter().all(|s| s.shape() == (5, cfg.d_model)));
        let b = encode(&w, &x).unwrap();
        assert!(a.output.bit_eq(&b.output));
    }

    #[test]
    fn too_many_frames_rejected() {
        let cfg = ModelConfig::micro(7);
        let w = ModelWeights::init(&cfg).unwrap();
        let x = features(&cfg, cfg.max_frames + 1, 0);
        assert!(encode(&w, &x).is_err());
        assert!(AudioFeatures::new(Matrix::zeros(0, cfg.feat_dim)).is_err());
    }

    #[test]
    fn logits_are_unembedded_final_residual() {
        let cfg = ModelConfig::micro(8);
        let w = ModelWeights::init(&cfg).unwrap();
        let enc = encode(&w, &features(&cfg, 4, 1)).unwrap();
        let step = decode_step(&w, &enc.output, &TokenSequence::new(vec![BOS, 5, 6])).unwrap();
        assert_eq!(step.logits.len(), cfg.vocab_size);
        assert_eq!(step.residuals.len(), cfg.n_dec_layers);
        let lens = unembed(&w.unembedding, step.residuals.last().unwrap());
        assert_eq!(argmax(&lens), argmax(&step.logits));
        assert!(lens
            .iter()
            .zip(&step.logits)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn prefix_rules() {
        let cfg = ModelConfig::micro(8);
        let w = ModelWeights::init(&cfg).unwrap();
        let enc = encode(&w, &features(&cfg, 4, 1)).unwrap();
        assert!(decode_step(&w, &enc.output, &TokenSequence::new(vec![5])).is_err());
        let long = TokenSequence::new(vec![BOS; cfg.max_tokens + 1]);
        assert!(decode_step(&w, &enc.output, &long).is_err());
    }

    #[test]
    fn incremental_rows_match_full_prefix() {
        let cfg = ModelConfig::micro(9);
        let w = ModelWeights::init(&cfg).unwrap();
        let enc = encode(&w, &features(&cfg, 6, 2)).unwrap();
        let full = decoder_states(
            &w,
            &enc.output,
            &TokenSequence::new(vec![BOS, 4, 5, 6]),
            &mut NoHook,
        )
        .unwrap();
        let short = decoder_states(
            &w,
            &enc.output,
            &TokenSequence::new(vec![BOS, 4]),
            &mut NoHook,
        )
        .unwrap();
        for (f, s) in full.iter().zip(&short) {
            assert!(f.slice_rows(0, 2).bit_eq(s));
        }
    }

    /// Final norm gain zeroed with bias `u` makes every residual `u`; the
    /// unembedding then favours EOS regardless of input.
    #[test]
    fn always_eos_model() {
        let cfg = ModelConfig::micro(10);
        let mut w = ModelWeights::init(&cfg).unwrap();
        w.dec_final_ln.gain = Matrix::zeros(1, cfg.d_model);
        let mut u = Matrix::zeros(1, cfg.d_model);
        u.set(0, 0, 1.0);
        w.dec_final_ln.bias = u;
        w.unembedding = Matrix::zeros(cfg.vocab_size, cfg.d_model);
        w.unembedding.set(EOS as usize, 0, 10.0);
        let out = greedy_decode(&w, &features(&cfg, 3, 0), 5).unwrap();
        assert_eq!(out.ids, vec![BOS, EOS]);
    }

    #[test]
    fn greedy_bounds_and_determinism() {
        let cfg = ModelConfig::micro(11);
        let w = ModelWeights::init(&cfg).unwrap();
        let x = features(&cfg, 4, 3);
        let one = greedy_decode(&w, &x, 1).unwrap();
        assert!(one.generated().len() <= 1);
        let a = greedy_decode(&w, &x, cfg.max_tokens).unwrap();
        let b = greedy_decode(&w, &x, cfg.max_tokens).unwrap();
        assert_eq!(a, b);
        assert!(greedy_decode(&w, &x, cfg.max_tokens + 1).is_err());
    }
}
