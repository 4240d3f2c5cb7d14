//! Teacher-forced cross-entropy training with full-batch Adam.

use super::autodiff::{Tape, Var};
use super::forward::{decoder_states, encode, unembed};
use super::types::{AudioFeatures, TokenSequence};
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{layer_norm, sinusoidal_positions, softmax, Matrix};

pub type Example = (AudioFeatures, TokenSequence);

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional per-block 0/1 masks (canonical block order) applied to
    /// gradients; masked entries never move.
    pub grad_mask: Option<Vec<Matrix>>,
}

impl TrainOptions {
    pub fn new(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_mask: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Loss before each epoch's update, plus the final loss.
    pub loss_curve: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().unwrap()
    }
}

struct LnVars {
    gain: Var,
    bias: Var,
}

struct AttnVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

struct FfnVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct EncVars {
    ln_attn: LnVars,
    attn: AttnVars,
    ln_ffn: LnVars,
    ffn: FfnVars,
}

struct DecVars {
    ln_self: LnVars,
    self_attn: AttnVars,
    ln_cross: LnVars,
    cross_attn: AttnVars,
    ln_ffn: LnVars,
    ffn: FfnVars,
}

struct ParamVars {
    all: Vec<Var>,
    input_w: Var,
    input_b: Var,
    enc: Vec<EncVars>,
    enc_final: LnVars,
    embedding: Var,
    dec: Vec<DecVars>,
    dec_final: LnVars,
    unembedding: Var,
}

/// Walks leaves in `ModelWeights::blocks` order.
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    fn ln(&mut self) -> LnVars {
        LnVars {
            gain: self.next(),
            bias: self.next(),
        }
    }

    fn attn(&mut self) -> AttnVars {
        AttnVars {
            wq: self.next(),
            bq: self.next(),
            wk: self.next(),
            bk: self.next(),
            wv: self.next(),
            bv: self.next(),
            wo: self.next(),
            bo: self.next(),
        }
    }

    fn ffn(&mut self) -> FfnVars {
        FfnVars {
            w1: self.next(),
            b1: self.next(),
            w2: self.next(),
            b2: self.next(),
        }
    }
}

fn param_vars(tape: &mut Tape, weights: &ModelWeights) -> ParamVars {
    let all: Vec<Var> = weights
        .blocks()
        .into_iter()
        .map(|(_, _, m)| tape.leaf(m.clone()))
        .collect();
    let mut c = Cursor { vars: &all, pos: 0 };
    let input_w = c.next();
    let input_b = c.next();
    let enc = (0..weights.config.n_enc_layers)
        .map(|_| EncVars {
            ln_attn: c.ln(),
            attn: c.attn(),
            ln_ffn: c.ln(),
            ffn: c.ffn(),
        })
        .collect();
    let enc_final = c.ln();
    let embedding = c.next();
    let dec = (0..weights.config.n_dec_layers)
        .map(|_| DecVars {
            ln_self: c.ln(),
            self_attn: c.attn(),
            ln_cross: c.ln(),
            cross_attn: c.attn(),
            ln_ffn: c.ln(),
            ffn: c.ffn(),
        })
        .collect();
    let dec_final = c.ln();
    let unembedding = c.next();
    debug_assert_eq!(c.pos, all.len());
    ParamVars {
        all,
        input_w,
        input_b,
        enc,
        enc_final,
        embedding,
        dec,
        dec_final,
        unembedding,
    }
}

fn attn_block(t: &mut Tape, p: &AttnVars, xq: Var, xkv: Var, n_heads: usize, causal: bool) -> Var {
    let q = t.affine(xq, p.wq, p.bq);
    let k = t.affine(xkv, p.wk, p.bk);
    let v = t.affine(xkv, p.wv, p.bv);
    let heads = t.attention(q, k, v, n_heads, causal);
    t.affine(heads, p.wo, p.bo)
}

fn ffn_block(t: &mut Tape, p: &FfnVars, x: Var) -> Var {
    let h = t.affine(x, p.w1, p.b1);
    let h = t.gelu(h);
    t.affine(h, p.w2, p.b2)
}

/// Summed token NLL for one example.
fn example_nll(t: &mut Tape, p: &ParamVars, weights: &ModelWeights, ex: &Example) -> Var {
    let cfg = &weights.config;
    let (features, tokens) = ex;
    let x = t.leaf(features.frames().clone());
    let pos = t.leaf(sinusoidal_positions(features.num_frames(), cfg.d_model));
    let h0 = t.affine(x, p.input_w, p.input_b);
    let mut h = t.add(h0, pos);
    for layer in &p.enc {
        let xn = t.layer_norm(h, layer.ln_attn.gain, layer.ln_attn.bias);
        let a = attn_block(t, &layer.attn, xn, xn, cfg.n_heads, false);
        h = t.add(h, a);
        let xn = t.layer_norm(h, layer.ln_ffn.gain, layer.ln_ffn.bias);
        let f = ffn_block(t, &layer.ffn, xn);
        h = t.add(h, f);
    }
    let enc_out = t.layer_norm(h, p.enc_final.gain, p.enc_final.bias);

    let input = &tokens.ids[..tokens.len() - 1];
    let targets = &tokens.ids[1..];
    let emb = t.embed(p.embedding, input);
    let dpos = t.leaf(sinusoidal_positions(input.len(), cfg.d_model));
    let mut g = t.add(emb, dpos);
    for layer in &p.dec {
        let xn = t.layer_norm(g, layer.ln_self.gain, layer.ln_self.bias);
        let a = attn_block(t, &layer.self_attn, xn, xn, cfg.n_heads, true);
        g = t.add(g, a);
        let xn = t.layer_norm(g, layer.ln_cross.gain, layer.ln_cross.bias);
        let c = attn_block(t, &layer.cross_attn, xn, enc_out, cfg.n_heads, false);
        g = t.add(g, c);
        let xn = t.layer_norm(g, layer.ln_ffn.gain, layer.ln_ffn.bias);
        let f = ffn_block(t, &layer.ffn, xn);
        g = t.add(g, f);
    }
    let r = t.layer_norm(g, p.dec_final.gain, p.dec_final.bias);
    let logits = t.matmul_t(r, p.unembedding);
    t.cross_entropy(logits, targets)
}

fn check_dataset(weights: &ModelWeights, dataset: &[Example]) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let mut n_targets = 0;
    for (i, (f, tokens)) in dataset.iter().enumerate() {
        f.check_against(&weights.config)
            .map_err(|e| Error::InvalidInput(format!("example {i}: {e}")))?;
        tokens
            .validate_decoder_input(&weights.config)
            .map_err(|e| Error::InvalidInput(format!("example {i}: {e}")))?;
        if tokens.len() < 2 || tokens.len() - 1 > weights.config.max_tokens {
            return Err(Error::InvalidInput(format!(
                "example {i}: token sequence length {} outside 2..={}",
                tokens.len(),
                weights.config.max_tokens + 1
            )));
        }
        n_targets += tokens.len() - 1;
    }
    Ok(n_targets)
}

/// Mean token cross-entropy and its gradient for every block (canonical order).
pub fn loss_and_grad(weights: &ModelWeights, dataset: &[Example]) -> Result<(f64, Vec<Matrix>)> {
    let n_targets = check_dataset(weights, dataset)?;
    let mut tape = Tape::new();
    let p = param_vars(&mut tape, weights);
    let nlls: Vec<Var> = dataset
        .iter()
        .map(|ex| example_nll(&mut tape, &p, weights, ex))
        .collect();
    let total = tape.sum(nlls);
    let loss = tape.scale(total, 1.0 / n_targets as f64);
    let loss_value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss);
    let block_grads = p
        .all
        .iter()
        .zip(weights.blocks())
        .map(|(v, (_, _, m))| {
            grads[v.0]
                .clone()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();
    Ok((loss_value, block_grads))
}

/// Mean teacher-forced token cross-entropy computed through the inference
/// forward pass (independent of the tape).
pub fn evaluate_loss(weights: &ModelWeights, dataset: &[Example]) -> Result<f64> {
    let n_targets = check_dataset(weights, dataset)?;
    let ln = &weights.dec_final_ln;
    let mut total = 0.0;
    for (features, tokens) in dataset {
        let enc = encode(weights, features)?;
        let input = TokenSequence::new(tokens.ids[..tokens.len() - 1].to_vec());
        let states = decoder_states(weights, &enc.output, &input, &mut super::forward::NoHook)?;
        let r = layer_norm(states.last().unwrap(), &ln.gain, &ln.bias);
        for (pos, &target) in tokens.ids[1..].iter().enumerate() {
            let p = softmax(&unembed(&weights.unembedding, r.row(pos)));
            total -= p[target as usize].ln();
        }
    }
    Ok(total / n_targets as f64)
}

pub fn train(
    weights: &ModelWeights,
    dataset: &[Example],
    epochs: usize,
    lr: f64,
) -> Result<TrainOutcome> {
    train_with(weights, dataset, &TrainOptions::new(epochs, lr))
}

pub fn train_with(
    weights: &ModelWeights,
    dataset: &[Example],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    check_dataset(weights, dataset)?;
    let mut w = weights.clone();
    let sizes: Vec<(usize, usize)> = w.blocks().iter().map(|(_, _, m)| m.shape()).collect();
    if let Some(mask) = &opts.grad_mask {
        if mask.len() != sizes.len() || mask.iter().zip(&sizes).any(|(m, s)| m.shape() != *s) {
            return Err(Error::InvalidInput(
                "gradient mask does not match parameter blocks".into(),
            ));
        }
    }
    let mut m1: Vec<Matrix> = sizes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    let mut m2 = m1.clone();
    let mut curve = Vec::with_capacity(opts.epochs + 1);
    for epoch in 0..opts.epochs {
        let (loss, grads) = loss_and_grad(&w, dataset)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        curve.push(loss);
        let t = (epoch + 1) as i32;
        let bc1 = 1.0 - opts.beta1.powi(t);
        let bc2 = 1.0 - opts.beta2.powi(t);
        for (bi, (_, _, block)) in w.blocks_mut().into_iter().enumerate() {
            let g = grads[bi].as_slice();
            let mask = opts.grad_mask.as_ref().map(|m| m[bi].as_slice());
            let (mm, vv) = (m1[bi].as_mut_slice(), m2[bi].as_mut_slice());
            for (j, p) in block.as_mut_slice().iter_mut().enumerate() {
                let gj = match mask {
                    Some(mk) if mk[j] == 0.0 => continue,
                    _ => g[j],
                };
                mm[j] = opts.beta1 * mm[j] + (1.0 - opts.beta1) * gj;
                vv[j] = opts.beta2 * vv[j] + (1.0 - opts.beta2) * gj * gj;
                let mhat = mm[j] / bc1;
                let vhat = vv[j] / bc2;
                *p -= opts.lr * mhat / (vhat.sqrt() + opts.eps);
            }
        }
    }
    let final_loss = evaluate_loss(&w, dataset)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: opts.epochs,
            loss: final_loss,
        });
    }
    curve.push(final_loss);
    Ok(TrainOutcome {
        weights: w,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights};

    fn tiny_dataset(cfg: &ModelConfig) -> Vec<Example> {
        (0..3)
            .map(|k| {
                let mut m = Matrix::zeros(3, cfg.feat_dim);
                for r in 0..3 {
                    m.set(r, k % cfg.feat_dim, 1.0);
                    m.set(r, (k + r) % cfg.feat_dim, 0.5);
                }
                (
                    AudioFeatures::new(m).unwrap(),
                    TokenSequence::wrap(&[4 + k as u32, 5]),
                )
            })
            .collect()
    }

    #[test]
    fn tape_loss_matches_inference_loss() {
        let cfg = ModelConfig::micro(31);
        let w = ModelWeights::init(&cfg).unwrap();
        let data = tiny_dataset(&cfg);
        let (tape_loss, _) = loss_and_grad(&w, &data).unwrap();
        let inf_loss = evaluate_loss(&w, &data).unwrap();
        assert!(
            (tape_loss - inf_loss).abs() < 1e-10,
            "{tape_loss} vs {inf_loss}"
        );
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let cfg = ModelConfig::micro(32);
        let w = ModelWeights::init(&cfg).unwrap();
        let out = train(&w, &tiny_dataset(&cfg), 3, 0.0).unwrap();
        assert!(out.weights.bit_eq(&w));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let w = ModelWeights::init(&ModelConfig::micro(33)).unwrap();
        assert!(matches!(
            train(&w, &[], 1, 0.01),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn divergence_reports_epoch() {
        let cfg = ModelConfig::micro(34);
        let mut w = ModelWeights::init(&cfg).unwrap();
        w.unembedding = w.unembedding.scale(1e308);
        w.unembedding.set(0, 0, f64::INFINITY);
        let err = train(&w, &tiny_dataset(&cfg), 5, 0.01).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn masked_entries_do_not_move() {
        let cfg = ModelConfig::micro(35);
        let w = ModelWeights::init(&cfg).unwrap();
        let mask: Vec<Matrix> = w
            .blocks()
            .iter()
            .map(|(name, _, m)| {
                let v = if name == "unembedding" { 1.0 } else { 0.0 };
                Matrix::filled(m.rows(), m.cols(), v)
            })
            .collect();
        let mut opts = TrainOptions::new(3, 0.05);
        opts.grad_mask = Some(mask);
        let out = train_with(&w, &tiny_dataset(&cfg), &opts).unwrap();
        assert!(out.weights.decoder[0].ffn.w1.bit_eq(&w.decoder[0].ffn.w1));
        assert!(!out.weights.unembedding.bit_eq(&w.unembedding));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig::micro(36);
        let w = ModelWeights::init(&cfg).unwrap();
        let a = train(&w, &tiny_dataset(&cfg), 4, 0.01).unwrap();
        let b = train(&w, &tiny_dataset(&cfg), 4, 0.01).unwrap();
        assert!(a.weights.bit_eq(&b.weights));
        assert_eq!(a.loss_curve, b.loss_curve);
    }
}
