//! Linear probes `P(h) = W h + b` on frozen activations.
//!
//! Training standardises each input dimension on the training split, runs
//! full-batch gradient descent on mean cross-entropy plus `λ‖W‖²`, and
//! folds the standardisation back into `W` and `b` so the saved probe acts
//! on raw activations. The L2 term is applied as a proximal shrink, which
//! stays stable for arbitrarily large `λ`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::trace_file::EncodedTensor;
use crate::instrument::Stack;
use crate::lens::format_num;
use crate::model::{
    encode, greedy_from_encoder, AudioFeatures, DecodeStep, EncoderOutput, ModelWeights, NoHook,
};
use crate::tensor::{argmax, softmax, Matrix};

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 500;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
/// Train-split class ratio above which a sweep warns.
pub const IMBALANCE_WARN_RATIO: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over frames of an encoder state.
    TimeMean,
    /// Decoder residual at the final position.
    FinalToken,
}

impl Pooling {
    pub fn stack(self) -> Stack {
        match self {
            Pooling::TimeMean => Stack::Encoder,
            Pooling::FinalToken => Stack::Decoder,
        }
    }
}

/// Which decode step supplies the final-token vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalTokenRule {
    /// The step that emits EOS (the last step of the decode).
    #[default]
    EmitsEos,
    /// One extra step with EOS fed back as input.
    AfterEos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub examples: Vec<(Vec<f64>, usize)>,
    pub label_names: Vec<String>,
    pub layer: usize,
    pub pooling: Pooling,
}

impl ProbeDataset {
    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.0.len())
    }

    fn check_labels(&self) -> Result<()> {
        let d = self.dim();
        for (i, (x, y)) in self.examples.iter().enumerate() {
            if x.len() != d {
                return Err(Error::Shape(format!(
                    "example {i} has dim {}, expected {d}",
                    x.len()
                )));
            }
            if *y >= self.n_classes() {
                return Err(Error::InvalidInput(format!(
                    "example {i} has label {y}, only {} classes",
                    self.n_classes()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("example {i} is not finite")));
            }
        }
        Ok(())
    }

    /// Labels in range, uniform dimension, and at least two classes
    /// present.
    pub fn validate(&self) -> Result<()> {
        self.check_labels()?;
        if self.n_classes() < 2 {
            return Err(Error::InvalidInput(
                "a probe needs at least 2 classes".into(),
            ));
        }
        let counts = self.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidInput(format!(
                "class {:?} has no examples",
                self.label_names[c]
            )));
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for (_, y) in &self.examples {
            if *y < counts.len() {
                counts[*y] += 1;
            }
        }
        counts
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            label_names: self.label_names.clone(),
            layer: self.layer,
            pooling: self.pooling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `k × d`, acting on raw activations.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub layer: usize,
    pub pooling: Pooling,
    pub label_names: Vec<String>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub model: ProbeModel,
    /// Regularised training loss before each epoch, then after the last.
    pub loss_curve: Vec<f64>,
}

pub fn train_probe(dataset: &ProbeDataset, config: &ProbeConfig) -> Result<ProbeModel> {
    Ok(fit_probe(dataset, config)?.model)
}

pub fn fit_probe(dataset: &ProbeDataset, config: &ProbeConfig) -> Result<ProbeFit> {
    dataset.validate()?;
    if !(config.lambda >= 0.0
        && config.lr > 0.0
        && config.lambda.is_finite()
        && config.lr.is_finite())
    {
        return Err(Error::InvalidInput(
            "probe needs lr > 0 and finite lambda >= 0".into(),
        ));
    }
    let n = dataset.examples.len();
    let d = dataset.dim();
    let k = dataset.n_classes();

    let mut mean = vec![0.0; d];
    for (x, _) in &dataset.examples {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for (x, _) in &dataset.examples {
        for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let mut z = Matrix::zeros(n, d);
    for (i, (x, _)) in dataset.examples.iter().enumerate() {
        for (j, v) in x.iter().enumerate() {
            z.set(i, j, (v - mean[j]) / std[j]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 1e-3).expect("valid normal");
    let mut w = Matrix::zeros(k, d);
    for v in w.as_mut_slice() {
        *v = init.sample(&mut rng);
    }
    let mut b = vec![0.0; k];
    let shrink = 1.0 + 2.0 * config.lr * config.lambda;
    let mut loss_curve = Vec::with_capacity(config.epochs + 1);

    for epoch in 0..=config.epochs {
        let mut logits = z.matmul_t(&w);
        logits.add_row_inplace(&Matrix::row_vector(b.clone()));
        let mut grad = Matrix::zeros(n, k);
        let mut nll = 0.0;
        for (i, (_, y)) in dataset.examples.iter().enumerate() {
            let p = softmax(logits.row(i));
            nll -= p[*y].max(f64::MIN_POSITIVE).ln();
            let g = grad.row_mut(i);
            g.copy_from_slice(&p);
            g[*y] -= 1.0;
        }
        let reg = config.lambda * w.as_slice().iter().map(|v| v * v).sum::<f64>();
        let loss = nll / n as f64 + reg;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        loss_curve.push(loss);
        if epoch == config.epochs {
            break;
        }
        let grad = grad.scale(1.0 / n as f64);
        let gw = grad.t_matmul(&z);
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *wv = (*wv - config.lr * gv) / shrink;
        }
        for (c, bv) in b.iter_mut().enumerate() {
            let gb: f64 = (0..n).map(|i| grad.get(i, c)).sum();
            *bv -= config.lr * gb;
        }
    }

    let mut w_raw = Matrix::zeros(k, d);
    let mut b_raw = b;
    for c in 0..k {
        for j in 0..d {
            let v = w.get(c, j) / std[j];
            w_raw.set(c, j, v);
            b_raw[c] -= v * mean[j];
        }
    }
    Ok(ProbeFit {
        model: ProbeModel {
            w: w_raw,
            b: b_raw,
            layer: dataset.layer,
            pooling: dataset.pooling,
            label_names: dataset.label_names.clone(),
            lambda: config.lambda,
        },
        loss_curve,
    })
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::Shape(format!(
                "activation has dim {}, probe expects {}",
                h.len(),
                self.dim()
            )));
        }
        Ok((0..self.n_classes())
            .map(|c| crate::tensor::dot(self.w.row(c), h) + self.b[c])
            .collect())
    }

    /// Class with the highest score (ties to the lowest id) and the
    /// softmax distribution.
    pub fn predict(&self, h: &[f64]) -> Result<(usize, Vec<f64>)> {
        let z = self.logits(h)?;
        Ok((argmax(&z), softmax(&z)))
    }

    pub fn to_file(&self) -> ProbeFile {
        ProbeFile {
            format: PROBE_FORMAT.to_string(),
            layer: self.layer,
            pooling: self.pooling,
            label_names: self.label_names.clone(),
            lambda: self.lambda,
            w: EncodedTensor::encode(&self.w),
            b: EncodedTensor::encode(&Matrix::row_vector(self.b.clone())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ProbeFile>(s)?.into_model()
    }
}

pub const PROBE_FORMAT: &str = "asrlens-probe/1";

/// Stored probe: metadata plus base64 `W` and `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub format: String,
    pub layer: usize,
    pub pooling: Pooling,
    pub label_names: Vec<String>,
    pub lambda: f64,
    pub w: EncodedTensor,
    pub b: EncodedTensor,
}

impl ProbeFile {
    pub fn into_model(self) -> Result<ProbeModel> {
        if self.format != PROBE_FORMAT {
            return Err(Error::Parse(format!(
                "unknown probe format {:?}",
                self.format
            )));
        }
        let w = self.w.decode()?;
        let b = self.b.decode()?.into_vec();
        if w.rows() != self.label_names.len() || b.len() != w.rows() || !w.is_finite() {
            return Err(Error::Parse(
                "probe parameters do not match its labels".into(),
            ));
        }
        Ok(ProbeModel {
            w,
            b,
            layer: self.layer,
            pooling: self.pooling,
            label_names: self.label_names,
            lambda: self.lambda,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvaluation {
    pub accuracy: f64,
    pub f1: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Accuracy and per-class F1 (0 where a class has no true or predicted
/// positives).
pub fn evaluate_probe(model: &ProbeModel, dataset: &ProbeDataset) -> Result<ProbeEvaluation> {
    let k = model.n_classes();
    if dataset.n_classes() != k {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, probe has {k}",
            dataset.n_classes()
        )));
    }
    dataset.check_labels()?;
    if dataset.examples.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    let mut correct = 0;
    let mut predictions = Vec::with_capacity(dataset.examples.len());
    for (x, y) in &dataset.examples {
        let (p, _) = model.predict(x)?;
        predictions.push(p);
        if p == *y {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[*y] += 1;
        }
    }
    let f1 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(ProbeEvaluation {
        accuracy: correct as f64 / dataset.examples.len() as f64,
        f1,
        predictions,
    })
}

/// Arithmetic mean over frames.
pub fn pool_encoder(states: &Matrix) -> Result<Vec<f64>> {
    if states.rows() == 0 {
        return Err(Error::InvalidInput("no frames to pool".into()));
    }
    Ok(states
        .sum_rows()
        .scale(1.0 / states.rows() as f64)
        .into_vec())
}

/// Residual `r^layer` (1-based) at the last decode step.
pub fn extract_final_token(steps: &[DecodeStep], layer: usize) -> Result<Vec<f64>> {
    let last = steps
        .last()
        .ok_or_else(|| Error::InvalidInput("decode produced no steps".into()))?;
    if layer == 0 || layer > last.residuals.len() {
        return Err(Error::InvalidInput(format!(
            "decoder layer {layer} not in trace (1..={})",
            last.residuals.len()
        )));
    }
    Ok(last.residuals[layer - 1].clone())
}

/// Everything a probe may read from one utterance.
#[derive(Clone, Debug)]
pub struct ProbeTrace {
    pub encoder: EncoderOutput,
    pub steps: Vec<DecodeStep>,
}

pub fn probe_trace(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
    rule: FinalTokenRule,
) -> Result<ProbeTrace> {
    let encoder = encode(weights, features)?;
    let (seq, mut steps) = greedy_from_encoder(weights, &encoder.output, max_len, &mut NoHook)?;
    if rule == FinalTokenRule::AfterEos
        && seq.ends_with_eos()
        && seq.len() <= weights.config.max_tokens
    {
        steps.push(crate::model::decode_step(weights, &encoder.output, &seq)?);
    }
    Ok(ProbeTrace { encoder, steps })
}

impl ProbeTrace {
    /// Probe input vector for `layer` under `pooling`. Encoder layer 0 is
    /// the post-frontend embedding.
    pub fn vector(&self, layer: usize, pooling: Pooling) -> Result<Vec<f64>> {
        match pooling {
            Pooling::TimeMean => {
                let state = if layer == 0 {
                    &self.encoder.embedded
                } else {
                    self.encoder.states.get(layer - 1).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "encoder layer {layer} not in trace (0..={})",
                            self.encoder.states.len()
                        ))
                    })?
                };
                pool_encoder(state)
            }
            Pooling::FinalToken => extract_final_token(&self.steps, layer),
        }
    }
}

/// Apply a stored probe to a live trace: one affine map and a softmax.
pub fn monitor(model: &ProbeModel, trace: &ProbeTrace) -> Result<(String, Vec<f64>)> {
    let h = trace.vector(model.layer, model.pooling)?;
    let (c, probs) = model.predict(&h)?;
    Ok((model.label_names[c].clone(), probs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub probe: ProbeConfig,
    pub train_fraction: f64,
    /// Seed of the train/test split, shared by every layer.
    pub split_seed: u64,
    pub max_len: usize,
    pub final_token: FinalTokenRule,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            split_seed: 0,
            max_len: 8,
            final_token: FinalTokenRule::EmitsEos,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLayerResult {
    pub layer: usize,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub f1: Vec<f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pooling: Pooling,
    pub label_names: Vec<String>,
    pub layers: Vec<ProbeLayerResult>,
    pub warnings: Vec<String>,
}

impl ProbeReport {
    pub fn best_layer(&self) -> Option<usize> {
        let mut best: Option<&ProbeLayerResult> = None;
        for r in &self.layers {
            if best.is_none_or(|b| r.test_accuracy > b.test_accuracy) {
                best = Some(r);
            }
        }
        best.map(|r| r.layer)
    }

    /// `layer,test_acc,train_acc,f1_<label>…` (wall time is left out so the
    /// file is reproducible).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string(), "test_acc".into(), "train_acc".into()];
        header.extend(self.label_names.iter().map(|l| format!("f1_{l}")));
        w.write_record(&header).expect("in-memory write");
        for r in &self.layers {
            let mut row = vec![
                r.layer.to_string(),
                format_num(r.test_accuracy),
                format_num(r.train_accuracy),
            ];
            row.extend(r.f1.iter().map(|f| format_num(*f)));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }
}

/// Deterministic shuffled split; returns `(train, test)` index lists.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

/// Probe every layer of one stack: encoder layers `0..=L_e` with time-mean
/// pooling, decoder layers `1..=L_d` with the final-token vector. All
/// layers share one split.
pub fn layer_sweep(
    weights: &ModelWeights,
    inputs: &[(AudioFeatures, usize)],
    label_names: &[String],
    pooling: Pooling,
    options: &SweepOptions,
) -> Result<ProbeReport> {
    if !(options.train_fraction > 0.0 && options.train_fraction < 1.0) {
        return Err(Error::InvalidInput(
            "train fraction must be in (0, 1)".into(),
        ));
    }
    let traces = inputs
        .par_iter()
        .map(|(x, _)| probe_trace(weights, x, options.max_len, options.final_token))
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<usize> = match pooling {
        Pooling::TimeMean => (0..=weights.config.n_enc_layers).collect(),
        Pooling::FinalToken => (1..=weights.config.n_dec_layers).collect(),
    };
    let (train_idx, test_idx) =
        split_indices(inputs.len(), options.train_fraction, options.split_seed);
    let mut warnings = Vec::new();

    let datasets = layers
        .iter()
        .map(|&layer| {
            Ok(ProbeDataset {
                examples: traces
                    .iter()
                    .zip(inputs)
                    .map(|(t, (_, y))| Ok((t.vector(layer, pooling)?, *y)))
                    .collect::<Result<Vec<_>>>()?,
                label_names: label_names.to_vec(),
                layer,
                pooling,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &datasets[0];
    first.check_labels()?;
    let train_counts = first.subset(&train_idx).class_counts();
    if let Some(c) = train_counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!(
            "class {:?} absent from the training split",
            label_names[c]
        )));
    }
    let (lo, hi) = (
        *train_counts.iter().min().expect("classes"),
        *train_counts.iter().max().expect("classes"),
    );
    if hi as f64 > IMBALANCE_WARN_RATIO * lo as f64 {
        let msg = format!(
            "training split class counts {train_counts:?} exceed a {IMBALANCE_WARN_RATIO}:1 ratio"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if test_idx.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }

    let results = datasets
        .par_iter()
        .map(|ds| {
            let start = Instant::now();
            let train = ds.subset(&train_idx);
            let test = ds.subset(&test_idx);
            let model = train_probe(&train, &options.probe)?;
            let tr = evaluate_probe(&model, &train)?;
            let te = evaluate_probe(&model, &test)?;
            Ok(ProbeLayerResult {
                layer: ds.layer,
                test_accuracy: te.accuracy,
                train_accuracy: tr.accuracy,
                f1: te.f1,
                wall_time_secs: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        pooling,
        label_names: label_names.to_vec(),
        layers: results,
        warnings,
    })
}
