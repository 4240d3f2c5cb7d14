use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }
}

/// Projections of one multi-head attention block. Weights are stored
/// `in × out` so that `y = x · w + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
}

impl AttentionParams {
    fn new(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl FeedForwardParams {
    fn new(d: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, d),
            b2: Matrix::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

/// All parameters of the reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub input_w: Matrix,
    pub input_b: Matrix,
    pub encoder: Vec<EncoderLayer>,
    pub enc_final_ln: LayerNormParams,
    pub token_embedding: Matrix,
    pub decoder: Vec<DecoderLayer>,
    pub dec_final_ln: LayerNormParams,
    /// Unembedding `E`, `|V| × d`.
    pub unembedding: Matrix,
}

fn push_ln<'a>(out: &mut Vec<(String, BlockKind, &'a Matrix)>, p: &str, ln: &'a LayerNormParams) {
    out.push((format!("{p}.gain"), BlockKind::Gain, &ln.gain));
    out.push((format!("{p}.bias"), BlockKind::Bias, &ln.bias));
}

fn push_attn<'a>(out: &mut Vec<(String, BlockKind, &'a Matrix)>, p: &str, a: &'a AttentionParams) {
    use BlockKind::*;
    out.push((format!("{p}.wq"), Weight, &a.wq));
    out.push((format!("{p}.bq"), Bias, &a.bq));
    out.push((format!("{p}.wk"), Weight, &a.wk));
    out.push((format!("{p}.bk"), Bias, &a.bk));
    out.push((format!("{p}.wv"), Weight, &a.wv));
    out.push((format!("{p}.bv"), Bias, &a.bv));
    out.push((format!("{p}.wo"), Weight, &a.wo));
    out.push((format!("{p}.bo"), Bias, &a.bo));
}

fn push_ffn<'a>(out: &mut Vec<(String, BlockKind, &'a Matrix)>, p: &str, f: &'a FeedForwardParams) {
    use BlockKind::*;
    out.push((format!("{p}.w1"), Weight, &f.w1));
    out.push((format!("{p}.b1"), Bias, &f.b1));
    out.push((format!("{p}.w2"), Weight, &f.w2));
    out.push((format!("{p}.b2"), Bias, &f.b2));
}

impl ModelWeights {
    /// Allocate correctly shaped parameters with LayerNorm gains at 1 and
    /// everything else at 0.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = config.ffn_dim();
        let encoder = (0..config.n_enc_layers)
            .map(|_| EncoderLayer {
                ln_attn: LayerNormParams::new(d),
                self_attn: AttentionParams::new(d),
                ln_ffn: LayerNormParams::new(d),
                ffn: FeedForwardParams::new(d, hidden),
            })
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|_| DecoderLayer {
                ln_self: LayerNormParams::new(d),
                self_attn: AttentionParams::new(d),
                ln_cross: LayerNormParams::new(d),
                cross_attn: AttentionParams::new(d),
                ln_ffn: LayerNormParams::new(d),
                ffn: FeedForwardParams::new(d, hidden),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input_w: Matrix::zeros(config.feat_dim, d),
            input_b: Matrix::zeros(1, d),
            encoder,
            enc_final_ln: LayerNormParams::new(d),
            token_embedding: Matrix::zeros(config.vocab_size, d),
            decoder,
            dec_final_ln: LayerNormParams::new(d),
            unembedding: Matrix::zeros(config.vocab_size, d),
        })
    }

    /// Seeded initialisation: weight matrices ~ N(0, 1/d_model), biases 0,
    /// norm gains 1. Identical configs give bit-identical weights.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut weights = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (_, kind, block) in weights.blocks_mut() {
            if kind == BlockKind::Weight {
                for v in block.as_mut_slice() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Ok(weights)
    }

    /// Every parameter block in canonical order (the weight-file order).
    pub fn blocks(&self) -> Vec<(String, BlockKind, &Matrix)> {
        let mut out = Vec::new();
        out.push(("input.w".to_string(), BlockKind::Weight, &self.input_w));
        out.push(("input.b".to_string(), BlockKind::Bias, &self.input_b));
        for (i, layer) in self.encoder.iter().enumerate() {
            push_ln(&mut out, &format!("enc.{i}.ln_attn"), &layer.ln_attn);
            push_attn(&mut out, &format!("enc.{i}.self_attn"), &layer.self_attn);
            push_ln(&mut out, &format!("enc.{i}.ln_ffn"), &layer.ln_ffn);
            push_ffn(&mut out, &format!("enc.{i}.ffn"), &layer.ffn);
        }
        push_ln(&mut out, "enc.final_ln", &self.enc_final_ln);
        out.push((
            "dec.token_embedding".to_string(),
            BlockKind::Weight,
            &self.token_embedding,
        ));
        for (i, layer) in self.decoder.iter().enumerate() {
            push_ln(&mut out, &format!("dec.{i}.ln_self"), &layer.ln_self);
            push_attn(&mut out, &format!("dec.{i}.self_attn"), &layer.self_attn);
            push_ln(&mut out, &format!("dec.{i}.ln_cross"), &layer.ln_cross);
            push_attn(&mut out, &format!("dec.{i}.cross_attn"), &layer.cross_attn);
            push_ln(&mut out, &format!("dec.{i}.ln_ffn"), &layer.ln_ffn);
            push_ffn(&mut out, &format!("dec.{i}.ffn"), &layer.ffn);
        }
        push_ln(&mut out, "dec.final_ln", &self.dec_final_ln);
        out.push((
            "unembedding".to_string(),
            BlockKind::Weight,
            &self.unembedding,
        ));
        out
    }

    /// Mutable counterpart of [`blocks`](Self::blocks), same order.
    pub fn blocks_mut(&mut self) -> Vec<(String, BlockKind, &mut Matrix)> {
        use BlockKind::*;
        fn ln<'a>(
            out: &mut Vec<(String, BlockKind, &'a mut Matrix)>,
            p: &str,
            l: &'a mut LayerNormParams,
        ) {
            out.push((format!("{p}.gain"), Gain, &mut l.gain));
            out.push((format!("{p}.bias"), Bias, &mut l.bias));
        }
        fn attn<'a>(
            out: &mut Vec<(String, BlockKind, &'a mut Matrix)>,
            p: &str,
            a: &'a mut AttentionParams,
        ) {
            out.push((format!("{p}.wq"), Weight, &mut a.wq));
            out.push((format!("{p}.bq"), Bias, &mut a.bq));
            out.push((format!("{p}.wk"), Weight, &mut a.wk));
            out.push((format!("{p}.bk"), Bias, &mut a.bk));
            out.push((format!("{p}.wv"), Weight, &mut a.wv));
            out.push((format!("{p}.bv"), Bias, &mut a.bv));
            out.push((format!("{p}.wo"), Weight, &mut a.wo));
            out.push((format!("{p}.bo"), Bias, &mut a.bo));
        }
        fn ffn<'a>(
            out: &mut Vec<(String, BlockKind, &'a mut Matrix)>,
            p: &str,
            f: &'a mut FeedForwardParams,
        ) {
            out.push((format!("{p}.w1"), Weight, &mut f.w1));
            out.push((format!("{p}.b1"), Bias, &mut f.b1));
            out.push((format!("{p}.w2"), Weight, &mut f.w2));
            out.push((format!("{p}.b2"), Bias, &mut f.b2));
        }
        let mut out = Vec::new();
        out.push(("input.w".to_string(), Weight, &mut self.input_w));
        out.push(("input.b".to_string(), Bias, &mut self.input_b));
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            ln(&mut out, &format!("enc.{i}.ln_attn"), &mut layer.ln_attn);
            attn(
                &mut out,
                &format!("enc.{i}.self_attn"),
                &mut layer.self_attn,
            );
            ln(&mut out, &format!("enc.{i}.ln_ffn"), &mut layer.ln_ffn);
            ffn(&mut out, &format!("enc.{i}.ffn"), &mut layer.ffn);
        }
        ln(&mut out, "enc.final_ln", &mut self.enc_final_ln);
        out.push((
            "dec.token_embedding".to_string(),
            Weight,
            &mut self.token_embedding,
        ));
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            ln(&mut out, &format!("dec.{i}.ln_self"), &mut layer.ln_self);
            attn(
                &mut out,
                &format!("dec.{i}.self_attn"),
                &mut layer.self_attn,
            );
            ln(&mut out, &format!("dec.{i}.ln_cross"), &mut layer.ln_cross);
            attn(
                &mut out,
                &format!("dec.{i}.cross_attn"),
                &mut layer.cross_attn,
            );
            ln(&mut out, &format!("dec.{i}.ln_ffn"), &mut layer.ln_ffn);
            ffn(&mut out, &format!("dec.{i}.ffn"), &mut layer.ffn);
        }
        ln(&mut out, "dec.final_ln", &mut self.dec_final_ln);
        out.push(("unembedding".to_string(), Weight, &mut self.unembedding));
        out
    }

    /// Verify every block against the shapes implied by the config, and
    /// that all entries are finite.
    pub fn shape_audit(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::zeros(&self.config)?;
        let want = expected.blocks();
        let have = self.blocks();
        if want.len() != have.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((name, _, w), (_, _, h)) in want.iter().zip(&have) {
            if w.shape() != h.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    w.shape(),
                    h.shape()
                )));
            }
            if !h.is_finite() {
                return Err(Error::Shape(format!("{name}: non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, _, m)| m.len()).sum()
    }

    /// Flatten all parameters in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, _, m) in self.blocks() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        self.config == other.config
            && self
                .blocks()
                .iter()
                .zip(other.blocks().iter())
                .all(|((_, _, a), (_, _, b))| a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_different_seed_differs() {
        let c = ModelConfig::micro(1);
        let a = ModelWeights::init(&c).unwrap();
        let b = ModelWeights::init(&c).unwrap();
        assert!(a.bit_eq(&b));
        let c2 = ModelConfig::micro(2);
        let other = ModelWeights::init(&c2).unwrap();
        assert_ne!(a.to_flat(), other.to_flat());
    }

    #[test]
    fn shape_audit_passes_and_catches_corruption() {
        let mut c = ModelConfig::micro(3);
        c.d_model = 64;
        c.n_heads = 4;
        let mut w = ModelWeights::init(&c).unwrap();
        w.shape_audit().unwrap();
        assert_eq!(w.config.head_dim(), 16);
        assert_eq!(w.decoder[0].cross_attn.wq.shape(), (64, 64));
        w.decoder[1].ffn.w1 = Matrix::zeros(3, 3);
        assert!(w.shape_audit().is_err());
    }

    #[test]
    fn blocks_and_blocks_mut_agree() {
        let mut w = ModelWeights::init(&ModelConfig::micro(4)).unwrap();
        let names: Vec<_> = w.blocks().into_iter().map(|(n, k, _)| (n, k)).collect();
        let names_mut: Vec<_> = w.blocks_mut().into_iter().map(|(n, k, _)| (n, k)).collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn invalid_config_errors() {
        let mut c = ModelConfig::micro(0);
        c.n_heads = 3;
        assert!(ModelWeights::init(&c).is_err());
    }
}
