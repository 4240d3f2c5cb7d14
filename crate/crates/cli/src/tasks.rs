//! Toy tasks as the CLI sees them: model training and input generation.

use anyhow::{bail, ensure, Context, Result};
use asrlens::experiments::SweepInput;
use asrlens::model::{AudioFeatures, ModelConfig, ModelWeights, TrainOptions};
use asrlens::tensor::Matrix;
use asrlens::toy::{AmbiguityTask, CopyTask, PlantedFault, XorTask};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Transcribe 1–3 spoken words.
    Copy,
    /// Copy model with a planted repetition head; mixed inputs.
    Fault,
    /// Same model, triggered inputs only.
    FaultTriggered,
    /// Two-word utterances with a strong context prior.
    Ambiguity,
    /// One word whose identity is the XOR of two spoken factors.
    Xor,
}

impl Task {
    pub fn config(self, seed: u64) -> ModelConfig {
        match self {
            Task::Copy => CopyTask::config(seed),
            Task::Fault | Task::FaultTriggered => PlantedFault::config(seed),
            Task::Ambiguity => AmbiguityTask::config(seed),
            Task::Xor => XorTask::config(seed),
        }
    }

    pub fn label_names(self) -> Option<Vec<String>> {
        match self {
            Task::Xor => Some(vec!["even".into(), "odd".into()]),
            Task::Fault => Some(vec!["clean".into(), "triggered".into()]),
            _ => None,
        }
    }
}

pub struct TrainSummary {
    pub weights: ModelWeights,
    pub loss_curve: Vec<f64>,
}

pub struct TrainArgs {
    pub epochs: Option<usize>,
    pub examples: Option<usize>,
    pub lr: Option<f64>,
}

pub fn train(task: Task, seed: u64, args: &TrainArgs) -> Result<TrainSummary> {
    let lr = args.lr.unwrap_or(0.01);
    let fit = |data: Vec<asrlens::model::Example>,
               cfg: &ModelConfig,
               epochs: usize|
     -> Result<TrainSummary> {
        let init = ModelWeights::init(cfg)?;
        let out = asrlens::model::train_with(&init, &data, &TrainOptions::new(epochs, lr))?;
        Ok(TrainSummary {
            weights: out.weights,
            loss_curve: out.loss_curve,
        })
    };
    match task {
        Task::Copy => {
            let t = CopyTask::new(seed);
            let data = t.examples(args.examples.unwrap_or(128), seed.wrapping_add(1))?;
            fit(data, &t.config, args.epochs.unwrap_or(400))
        }
        Task::Ambiguity => {
            let t = AmbiguityTask::new(seed);
            let data = t.training_examples(args.examples.unwrap_or(96), seed.wrapping_add(21))?;
            fit(data, &t.config, args.epochs.unwrap_or(300))
        }
        Task::Xor => {
            let t = XorTask::new(seed);
            let data = t
                .examples(args.examples.unwrap_or(64), seed.wrapping_add(31))?
                .into_iter()
                .map(|(e, _)| e)
                .collect();
            fit(data, &t.config, args.epochs.unwrap_or(300))
        }
        Task::Fault | Task::FaultTriggered => {
            if args.examples.is_some() || args.lr.is_some() {
                log::warn!("the planted-fault recipe fixes its own data size and learning rates");
            }
            let epochs = args.epochs.unwrap_or(400);
            let b = PlantedFault::new(seed).build(300, epochs)?;
            let mut loss_curve = b.stage1_loss;
            loss_curve.extend(b.stage2_loss);
            Ok(TrainSummary {
                weights: b.faulty,
                loss_curve,
            })
        }
    }
}

/// One generated input plus its class label when the task has one.
pub struct Labeled {
    pub input: SweepInput,
    pub label: Option<usize>,
}

/// `count` inputs of `task` for a model trained on it; the task's own seed
/// comes from the weights.
pub fn generate(
    task: Task,
    weights: &ModelWeights,
    count: usize,
    seed: u64,
) -> Result<Vec<Labeled>> {
    let model_seed = weights.config.seed;
    ensure!(
        task.config(model_seed) == weights.config,
        "weights were not trained for the {task:?} task"
    );
    let out = match task {
        Task::Copy => CopyTask::new(model_seed)
            .examples(count, seed)?
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| Labeled {
                input: SweepInput {
                    ground_truth: Some(y),
                    ..SweepInput::new(format!("copy{i}"), x)
                },
                label: None,
            })
            .collect(),
        Task::Fault | Task::FaultTriggered => {
            let pf = PlantedFault::new(model_seed);
            let inputs = if task == Task::Fault {
                pf.inputs(count, seed)?
            } else {
                pf.triggered_inputs(count, seed)?
            };
            inputs
                .into_iter()
                .enumerate()
                .map(|(i, f)| Labeled {
                    label: Some(f.triggered as usize),
                    input: SweepInput {
                        ground_truth: Some(f.ground_truth),
                        ..SweepInput::new(format!("fault{i}"), f.features)
                    },
                })
                .collect()
        }
        Task::Ambiguity => AmbiguityTask::new(model_seed)
            .test_inputs(count, seed)?
            .into_iter()
            .enumerate()
            .map(|(i, a)| Labeled {
                input: SweepInput {
                    id: format!("amb{i}"),
                    features: a.features,
                    ground_truth: Some(a.ground_truth),
                    target_word: Some(a.target_word),
                    substitute: Some(a.substitute),
                },
                label: None,
            })
            .collect(),
        Task::Xor => XorTask::new(model_seed)
            .examples(count, seed)?
            .into_iter()
            .enumerate()
            .map(|(i, ((x, y), label))| Labeled {
                input: SweepInput {
                    ground_truth: Some(y),
                    ..SweepInput::new(format!("xor{i}"), x)
                },
                label: Some(label),
            })
            .collect(),
    };
    Ok(out)
}

/// Frames from a CSV file, one frame per line, no header.
pub fn read_features(path: &Path) -> Result<AudioFeatures> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .with_context(|| format!("bad number {v:?}"))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        bail!("{} has no frames", path.display());
    }
    Ok(AudioFeatures::new(Matrix::from_rows(&rows)?)?)
}
