//! Python bindings for asrlens.
//!
//! Reports with nested structure come back as JSON strings; decode them with
//! `json.loads`.

use asrlens::encoder_lens::{encoder_lens_with, EncoderLensOptions};
use asrlens::experiments::{run_sweep, SweepInput, SweepSpec};
use asrlens::instrument::{run_with_interventions, ComponentId, InterventionPlan};
use asrlens::lens::{lens_run, saturation_layer_with, SaturationRule};
use asrlens::metrics::{self, PhonemeFamilies, REPETITION_MIN_REPEATS, REPETITION_N_MAX};
use asrlens::model::{self, AudioFeatures, ModelConfig, ModelWeights, TokenSequence};
use asrlens::tensor::Matrix;
use asrlens::toy::{AmbiguityTask, CopyTask, PlantedFault, XorTask};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<AudioFeatures> {
    AudioFeatures::new(Matrix::from_rows(&rows).map_err(err)?).map_err(err)
}

fn components(names: &[String]) -> PyResult<Vec<ComponentId>> {
    names.iter().map(|n| n.parse().map_err(err)).collect()
}

fn rule(name: &str) -> PyResult<SaturationRule> {
    match name {
        "stable" => Ok(SaturationRule::Stable),
        "first_match" => Ok(SaturationRule::FirstMatch),
        other => Err(PyValueError::new_err(format!(
            "unknown saturation rule {other:?}"
        ))),
    }
}

/// Trained or freshly initialized model weights.
#[pyclass(module = "asrlens_py")]
struct Model {
    weights: ModelWeights,
}

#[pymethods]
impl Model {
    /// Random init from a JSON config with the keys `d_model`,
    /// `n_enc_layers`, `n_dec_layers`, `n_heads`, `vocab_size`,
    /// `max_frames`, `feat_dim`, `max_tokens` and `seed`.
    #[staticmethod]
    fn init(config_json: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(err)?;
        Ok(Self {
            weights: model::init_model(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            weights: model::load_weights(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_weights(&self.weights, path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.weights.config).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.weights.num_parameters()
    }

    /// Greedy transcript, BOS included.
    #[pyo3(signature = (frames, max_len=None))]
    fn transcribe(&self, frames: Vec<Vec<f64>>, max_len: Option<usize>) -> PyResult<Vec<u32>> {
        let x = features(frames)?;
        let n = max_len.unwrap_or(self.weights.config.max_tokens);
        Ok(model::greedy_decode(&self.weights, &x, n).map_err(err)?.ids)
    }

    /// Logit-lens report as JSON.
    #[pyo3(signature = (frames, k=5, max_len=None, rule_name="stable"))]
    fn lens(
        &self,
        frames: Vec<Vec<f64>>,
        k: usize,
        max_len: Option<usize>,
        rule_name: &str,
    ) -> PyResult<String> {
        let x = features(frames)?;
        let n = max_len.unwrap_or(self.weights.config.max_tokens);
        let report = lens_run(&self.weights, &x, n, k, rule(rule_name)?).map_err(err)?;
        serde_json::to_string(&report).map_err(err)
    }

    /// Encoder-lens result as JSON.
    #[pyo3(signature = (frames, max_len=None, skip_norm=false, include_embedding=true))]
    fn encoder_lens(
        &self,
        frames: Vec<Vec<f64>>,
        max_len: Option<usize>,
        skip_norm: bool,
        include_embedding: bool,
    ) -> PyResult<String> {
        let x = features(frames)?;
        let opts = EncoderLensOptions {
            skip_norm,
            include_embedding,
        };
        let n = max_len.unwrap_or(self.weights.config.max_tokens);
        let result = encoder_lens_with(&self.weights, &x, n, opts).map_err(err)?;
        serde_json::to_string(&result).map_err(err)
    }

    /// Greedy transcript with the named components zeroed.
    #[pyo3(signature = (frames, names, max_len=None))]
    fn ablate(
        &self,
        frames: Vec<Vec<f64>>,
        names: Vec<String>,
        max_len: Option<usize>,
    ) -> PyResult<Vec<u32>> {
        let x = features(frames)?;
        let plan = InterventionPlan::ablate(&components(&names)?);
        let n = max_len.unwrap_or(self.weights.config.max_tokens);
        Ok(run_with_interventions(&self.weights, &x, n, &plan)
            .map_err(err)?
            .0
            .ids)
    }

    /// Greedy transcript with the named components blended toward their
    /// values on `reference` frames.
    #[pyo3(signature = (frames, reference, names, alpha=1.0, max_len=None))]
    fn patch(
        &self,
        frames: Vec<Vec<f64>>,
        reference: Vec<Vec<f64>>,
        names: Vec<String>,
        alpha: f64,
        max_len: Option<usize>,
    ) -> PyResult<Vec<u32>> {
        let x = features(frames)?;
        let r = features(reference)?;
        let ids = components(&names)?;
        let n = max_len.unwrap_or(self.weights.config.max_tokens);
        let (_, records) =
            asrlens::instrument::record_run(&self.weights, &r, n, &ids).map_err(err)?;
        let plan = InterventionPlan::patch(&ids, alpha, &records);
        Ok(run_with_interventions(&self.weights, &x, n, &plan)
            .map_err(err)?
            .0
            .ids)
    }

    /// Runs a sweep. `spec_json` holds a serialized sweep spec; optional
    /// per-input lists must match `inputs` in length. Returns the report as
    /// JSON.
    #[pyo3(signature = (spec_json, inputs, ground_truths=None, target_words=None, substitutes=None))]
    fn sweep(
        &self,
        spec_json: &str,
        inputs: Vec<Vec<Vec<f64>>>,
        ground_truths: Option<Vec<Vec<u32>>>,
        target_words: Option<Vec<u32>>,
        substitutes: Option<Vec<u32>>,
    ) -> PyResult<String> {
        let spec: SweepSpec = serde_json::from_str(spec_json).map_err(err)?;
        let n = inputs.len();
        let lens_ok = [
            ground_truths.as_ref().map(Vec::len),
            target_words.as_ref().map(Vec::len),
            substitutes.as_ref().map(Vec::len),
        ]
        .into_iter()
        .flatten()
        .all(|l| l == n);
        if !lens_ok {
            return Err(PyValueError::new_err(
                "per-input lists must match the number of inputs",
            ));
        }
        let items = inputs
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                Ok(SweepInput {
                    ground_truth: ground_truths
                        .as_ref()
                        .map(|g| TokenSequence::new(g[i].clone())),
                    target_word: target_words.as_ref().map(|t| t[i]),
                    substitute: substitutes.as_ref().map(|s| s[i]),
                    ..SweepInput::new(format!("in{i}"), features(f)?)
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let report = run_sweep(&self.weights, &spec, &items).map_err(err)?;
        report.to_json().map_err(err)
    }
}

/// Trains a toy model. `task` is one of copy, fault, ambiguity, xor.
#[pyfunction]
#[pyo3(signature = (task, seed=0, epochs=None))]
fn train_toy(py: Python<'_>, task: &str, seed: u64, epochs: Option<usize>) -> PyResult<Model> {
    let task = task.to_owned();
    let weights = py
        .detach(move || -> asrlens::Result<ModelWeights> {
            let fit = |data: Vec<model::Example>, cfg: &ModelConfig, default: usize| {
                let init = ModelWeights::init(cfg)?;
                Ok(model::train(&init, &data, epochs.unwrap_or(default), 0.01)?.weights)
            };
            match task.as_str() {
                "copy" => {
                    let t = CopyTask::new(seed);
                    fit(t.examples(128, seed.wrapping_add(1))?, &t.config, 400)
                }
                "ambiguity" => {
                    let t = AmbiguityTask::new(seed);
                    fit(
                        t.training_examples(96, seed.wrapping_add(21))?,
                        &t.config,
                        300,
                    )
                }
                "xor" => {
                    let t = XorTask::new(seed);
                    let data = t
                        .examples(64, seed.wrapping_add(31))?
                        .into_iter()
                        .map(|(e, _)| e)
                        .collect();
                    fit(data, &t.config, 300)
                }
                "fault" => Ok(PlantedFault::new(seed)
                    .build(300, epochs.unwrap_or(400))?
                    .faulty),
                other => Err(asrlens::Error::InvalidInput(format!(
                    "unknown task {other:?}"
                ))),
            }
        })
        .map_err(err)?;
    Ok(Model { weights })
}

/// Example frames and transcripts for a toy copy model trained with `seed`.
#[pyfunction]
fn copy_examples(
    seed: u64,
    count: usize,
    sample_seed: u64,
) -> PyResult<Vec<(Vec<Vec<f64>>, Vec<u32>)>> {
    let data = CopyTask::new(seed)
        .examples(count, sample_seed)
        .map_err(err)?;
    Ok(data
        .into_iter()
        .map(|(x, y)| {
            let m = x.frames();
            ((0..m.rows()).map(|r| m.row(r).to_vec()).collect(), y.ids)
        })
        .collect())
}

/// Word error rate over token ids.
#[pyfunction]
fn wer(reference: Vec<u32>, hypothesis: Vec<u32>) -> PyResult<f64> {
    metrics::wer(&reference, &hypothesis).map_err(err)
}

/// Family-weighted phoneme error rate; `families[p]` is the family of
/// phoneme `p`. None when both sequences are empty.
#[pyfunction]
fn per(
    reference: Vec<usize>,
    hypothesis: Vec<usize>,
    families: Vec<usize>,
) -> PyResult<Option<f64>> {
    let fam = PhonemeFamilies::from_ids(families);
    Ok(metrics::per(&reference, &hypothesis, &fam)
        .map_err(err)?
        .rate())
}

/// Whether `tokens` contains a back-to-back repeated n-gram.
#[pyfunction]
#[pyo3(signature = (tokens, n_max=REPETITION_N_MAX, min_repeats=REPETITION_MIN_REPEATS))]
fn detect_repetition(tokens: Vec<u32>, n_max: usize, min_repeats: usize) -> bool {
    metrics::detect_repetition(&tokens, n_max, min_repeats).repeating
}

/// 1-based layer at which the per-layer argmax settles on `final_token`.
#[pyfunction]
#[pyo3(signature = (argmaxes, final_token, rule_name="stable"))]
fn saturation_layer(
    argmaxes: Vec<u32>,
    final_token: u32,
    rule_name: &str,
) -> PyResult<Option<usize>> {
    Ok(saturation_layer_with(
        &argmaxes,
        final_token,
        rule(rule_name)?,
    ))
}

#[pymodule]
fn asrlens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(copy_examples, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(per, m)?)?;
    m.add_function(wrap_pyfunction!(detect_repetition, m)?)?;
    m.add_function(wrap_pyfunction!(saturation_layer, m)?)?;
    Ok(())
}
