//! Logit lens over decoder residual streams.
//!
//! Every layer's residual `r^l` is projected with the same `unembed` the
//! model head uses, so the top layer reproduces the output distribution
//! bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    encode, forced_steps, greedy_from_encoder, is_special, unembed, AudioFeatures, DecodeStep,
    ModelWeights, NoHook, TokenSequence,
};
use crate::tensor::{argmax, softmax, top_k_indices, Matrix};

pub const TRAJECTORY_K: usize = 5;
pub const RECALL_K: usize = 10;
pub const RECALL_OFFSETS: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensProjection {
    pub step: usize,
    /// 1-based decoder layer.
    pub layer: usize,
    pub logits: Vec<f64>,
    /// `(token, probability)`, descending; ties go to the lower id.
    pub topk: Vec<(u32, f64)>,
}

impl LensProjection {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn argmax(&self) -> u32 {
        argmax(&self.logits) as u32
    }

    /// Top `k` token ids from the full logits.
    pub fn top_ids(&self, k: usize) -> Vec<u32> {
        top_k_indices(&self.logits, k)
            .into_iter()
            .map(|i| i as u32)
            .collect()
    }
}

/// Project one residual through `E` and keep the top `k`.
pub fn project(
    step: usize,
    layer: usize,
    residual: &[f64],
    unembedding: &Matrix,
    k: usize,
) -> Result<LensProjection> {
    if residual.len() != unembedding.cols() {
        return Err(Error::Shape(format!(
            "residual has dim {}, unembedding expects {}",
            residual.len(),
            unembedding.cols()
        )));
    }
    if k == 0 || k > unembedding.rows() {
        return Err(Error::InvalidInput(format!(
            "k = {k} must be in 1..={}",
            unembedding.rows()
        )));
    }
    let logits = unembed(unembedding, residual);
    let probs = softmax(&logits);
    let topk = top_k_indices(&logits, k)
        .into_iter()
        .map(|i| (i as u32, probs[i]))
        .collect();
    Ok(LensProjection {
        step,
        layer,
        logits,
        topk,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaturationRule {
    /// Earliest layer from which every deeper layer agrees with the output.
    #[default]
    Stable,
    /// Earliest layer whose top-1 matches the output, ignoring later flips.
    FirstMatch,
}

/// 1-based saturation layer for one step. `None` if `argmaxes` is empty or
/// its last entry is not `final_token` (the top layer is the output).
pub fn saturation_layer(argmaxes: &[u32], final_token: u32) -> Option<usize> {
    saturation_layer_with(argmaxes, final_token, SaturationRule::Stable)
}

pub fn saturation_layer_with(
    argmaxes: &[u32],
    final_token: u32,
    rule: SaturationRule,
) -> Option<usize> {
    if argmaxes.last() != Some(&final_token) {
        return None;
    }
    let idx = match rule {
        SaturationRule::Stable => argmaxes
            .iter()
            .rposition(|&t| t != final_token)
            .map_or(0, |i| i + 1),
        SaturationRule::FirstMatch => argmaxes.iter().position(|&t| t == final_token)?,
    };
    Some(idx + 1)
}

/// Lens output for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    /// Decoder input plus emitted tokens, starting with BOS.
    pub tokens: Vec<u32>,
    /// Model output token at each step (the top-layer argmax).
    pub selected: Vec<u32>,
    /// `[step][layer - 1]`.
    pub projections: Vec<Vec<LensProjection>>,
    pub saturation: Vec<usize>,
    pub rule: SaturationRule,
    /// Probability of `selected[step]` at each layer, `[step][layer - 1]`.
    pub selected_prob: Vec<Vec<f64>>,
}

impl LensReport {
    pub fn n_layers(&self) -> usize {
        self.projections.first().map_or(0, Vec::len)
    }

    pub fn n_steps(&self) -> usize {
        self.selected.len()
    }

    /// Per-layer argmax at `step`.
    pub fn argmaxes(&self, step: usize) -> Vec<u32> {
        self.projections[step]
            .iter()
            .map(LensProjection::argmax)
            .collect()
    }
}

fn build_report(
    weights: &ModelWeights,
    tokens: Vec<u32>,
    steps: &[DecodeStep],
    k: usize,
    rule: SaturationRule,
) -> Result<LensReport> {
    let mut projections = Vec::with_capacity(steps.len());
    let mut selected = Vec::with_capacity(steps.len());
    let mut saturation = Vec::with_capacity(steps.len());
    let mut selected_prob = Vec::with_capacity(steps.len());
    for (s, step) in steps.iter().enumerate() {
        let layers = step
            .residuals
            .iter()
            .enumerate()
            .map(|(i, r)| project(s, i + 1, r, &weights.unembedding, k))
            .collect::<Result<Vec<_>>>()?;
        let chosen = argmax(&step.logits) as u32;
        let argmaxes: Vec<u32> = layers.iter().map(LensProjection::argmax).collect();
        saturation.push(
            saturation_layer_with(&argmaxes, chosen, rule).expect("top layer is the model output"),
        );
        selected_prob.push(
            layers
                .iter()
                .map(|p| p.probabilities()[chosen as usize])
                .collect(),
        );
        selected.push(chosen);
        projections.push(layers);
    }
    Ok(LensReport {
        tokens,
        selected,
        projections,
        saturation,
        rule,
        selected_prob,
    })
}

/// Greedy decode with the lens applied at every step and layer.
pub fn lens_run(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
    k: usize,
    rule: SaturationRule,
) -> Result<LensReport> {
    let enc = encode(weights, features)?;
    let (seq, steps) = greedy_from_encoder(weights, &enc.output, max_len, &mut NoHook)?;
    build_report(weights, seq.ids, &steps, k, rule)
}

/// Lens over a teacher-forced pass: step `s` sees `tokens[..=s]`.
/// `selected` is still the model's own top-layer choice.
pub fn lens_forced(
    weights: &ModelWeights,
    features: &AudioFeatures,
    tokens: &TokenSequence,
    k: usize,
    rule: SaturationRule,
) -> Result<LensReport> {
    let steps = forced_steps(weights, features, tokens)?;
    build_report(weights, tokens.ids.clone(), &steps, k, rule)
}

/// Per-layer mean with standard error of the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
    /// Observations behind each layer's mean.
    pub count: Vec<usize>,
}

impl LayerCurve {
    /// `samples[layer]` holds that layer's observations. Empty layers get
    /// NaN mean and count 0.
    pub fn from_samples(samples: &[Vec<f64>]) -> Self {
        let mut mean = Vec::with_capacity(samples.len());
        let mut sem = Vec::with_capacity(samples.len());
        let mut count = Vec::with_capacity(samples.len());
        for xs in samples {
            let (m, s) = mean_sem(xs);
            mean.push(m);
            sem.push(s);
            count.push(xs.len());
        }
        Self { mean, sem, count }
    }

    /// CSV with header `layer,mean,sem,n`; layers are 1-based unless
    /// `first_layer` says otherwise.
    pub fn to_csv(&self, first_layer: usize) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "mean", "sem", "n"])
            .expect("in-memory write");
        for (i, ((m, s), n)) in self.mean.iter().zip(&self.sem).zip(&self.count).enumerate() {
            w.write_record([
                (i + first_layer).to_string(),
                format_num(*m),
                format_num(*s),
                n.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }
}

pub(crate) fn format_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Sample mean and standard error (n − 1 denominator; 0 for n = 1).
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Mean probability of the finally selected token at each layer, over
/// all non-special selections in `reports`.
pub fn selected_token_curve(reports: &[LensReport]) -> Result<LayerCurve> {
    let n_layers = reports
        .first()
        .ok_or_else(|| Error::InvalidInput("no lens reports".into()))?
        .n_layers();
    let mut samples = vec![Vec::new(); n_layers];
    for r in reports {
        if r.n_layers() != n_layers && r.n_steps() > 0 {
            return Err(Error::Shape("lens reports from different depths".into()));
        }
        for (s, probs) in r.selected_prob.iter().enumerate() {
            if is_special(r.selected[s]) {
                continue;
            }
            for (l, p) in probs.iter().enumerate() {
                samples[l].push(*p);
            }
        }
    }
    if samples.first().is_none_or(Vec::is_empty) {
        return Err(Error::InvalidInput("no non-special selected tokens".into()));
    }
    Ok(LayerCurve::from_samples(&samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationSummary {
    /// Mean over every step of every utterance.
    pub per_token: f64,
    /// Mean of per-utterance means.
    pub per_utterance: f64,
    pub n_tokens: usize,
    pub n_utterances: usize,
}

/// Average saturation layer both ways. EOS steps count; utterances with
/// no steps are skipped.
pub fn average_saturation(reports: &[LensReport]) -> Result<SaturationSummary> {
    let all: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.saturation.iter().map(|&l| l as f64))
        .collect();
    let per_utt: Vec<f64> = reports
        .iter()
        .filter(|r| !r.saturation.is_empty())
        .map(|r| r.saturation.iter().sum::<usize>() as f64 / r.saturation.len() as f64)
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidInput("no decode steps to summarise".into()));
    }
    Ok(SaturationSummary {
        per_token: mean_sem(&all).0,
        per_utterance: mean_sem(&per_utt).0,
        n_tokens: all.len(),
        n_utterances: per_utt.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCell {
    pub hits: usize,
    pub total: usize,
}

impl RecallCell {
    pub fn recall(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Recall@k, `cells[layer - 1][offset index]`; `None` where no step had a
/// target at that offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub k: usize,
    pub offsets: Vec<usize>,
    pub cells: Vec<Vec<Option<RecallCell>>>,
}

impl RecallTable {
    pub fn get(&self, layer: usize, offset: usize) -> Option<f64> {
        let j = self.offsets.iter().position(|&o| o == offset)?;
        self.cells[layer - 1][j].map(|c| c.recall())
    }

    /// CSV `layer,offset,hits,total,recall`; absent cells have an empty
    /// recall field.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "offset", "hits", "total", "recall"])
            .expect("in-memory write");
        for (l, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                let (hits, total, recall) = match cell {
                    Some(c) => (c.hits, c.total, format_num(c.recall())),
                    None => (0, 0, String::new()),
                };
                w.write_record([
                    (l + 1).to_string(),
                    self.offsets[j].to_string(),
                    hits.to_string(),
                    total.to_string(),
                    recall,
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }
}

/// Fraction of steps whose layer top-k contains the ground-truth token
/// `offset` steps ahead. `ground_truth[i][s]` is the token due at step `s`
/// of report `i`. Targets past the end, and special targets, are skipped.
pub fn future_token_recall(
    reports: &[LensReport],
    ground_truth: &[Vec<u32>],
    offsets: &[usize],
    k: usize,
) -> Result<RecallTable> {
    if reports.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} reports but {} ground-truth sequences",
            reports.len(),
            ground_truth.len()
        )));
    }
    let n_layers = reports.iter().map(LensReport::n_layers).max().unwrap_or(0);
    let vocab = reports
        .iter()
        .flat_map(|r| r.projections.first().and_then(|p| p.first()))
        .map(|p| p.logits.len())
        .next()
        .unwrap_or(usize::MAX);
    if k == 0 || k > vocab {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds vocabulary of {vocab}"
        )));
    }
    let mut cells = vec![vec![RecallCell { hits: 0, total: 0 }; offsets.len()]; n_layers];
    for (r, gt) in reports.iter().zip(ground_truth) {
        for (s, layers) in r.projections.iter().enumerate() {
            for (l, proj) in layers.iter().enumerate() {
                let top = proj.top_ids(k);
                for (j, &off) in offsets.iter().enumerate() {
                    let Some(&target) = gt.get(s + off) else {
                        continue;
                    };
                    if is_special(target) {
                        continue;
                    }
                    cells[l][j].total += 1;
                    if top.contains(&target) {
                        cells[l][j].hits += 1;
                    }
                }
            }
        }
    }
    Ok(RecallTable {
        k,
        offsets: offsets.to_vec(),
        cells: cells
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|c| (c.total > 0).then_some(c))
                    .collect()
            })
            .collect(),
    })
}
