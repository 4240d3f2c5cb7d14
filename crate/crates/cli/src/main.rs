use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use asrlens::encoder_lens::{encoder_lens_batch, EncoderLensOptions};
use asrlens::experiments::{
    make_white_noise, restoration_accounting, restoration_records, run_sweep, NoiseCalibration,
    SweepInput,
};
use asrlens::instrument::{
    record_run, run_with_interventions, ComponentId, ComponentPattern, InterventionPlan,
};
use asrlens::lens::{
    average_saturation, lens_run, selected_token_curve, LensReport, SaturationRule, TRAJECTORY_K,
};
use asrlens::metrics::{
    cosine_curve, detect_repetition, layer_per_curve, token_wer, EmbeddingTable, MetricReport,
    PhonemeLexicon, REPETITION_MIN_REPEATS, REPETITION_N_MAX,
};
use asrlens::model::{
    greedy_decode, load_weights, save_weights, AudioFeatures, ModelWeights, TokenSequence,
};
use asrlens::probe::{
    layer_sweep, probe_trace, train_probe, FinalTokenRule, Pooling, ProbeConfig, ProbeDataset,
    SweepOptions,
};
use asrlens::vocab::Vocabulary;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

mod spec;
mod tasks;

use tasks::{Labeled, Task, TrainArgs};

#[derive(Parser)]
#[command(
    name = "asrlens",
    version,
    about = "Interpretability tools for encoder-decoder ASR transformers"
)]
struct Cli {
    /// Model weight file (written by train-toy, read by everything else).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory; tables go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Token list, one per line, for rendering transcripts.
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    /// Pretty-printed JSON.
    StructuredText,
}

#[derive(Subcommand)]
enum Command {
    /// Selected-token probability per decoder layer and saturation layers.
    Lens {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long, default_value_t = TRAJECTORY_K)]
        k: usize,
        #[arg(long, value_enum, default_value_t = RuleArg::Stable)]
        rule: RuleArg,
    },
    /// Layer-wise linear probes on a labeled task.
    Probe {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long, value_enum, default_value_t = PoolingArg::TimeMean)]
        pooling: PoolingArg,
        #[arg(long, default_value_t = asrlens::probe::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = asrlens::probe::DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = asrlens::probe::DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = asrlens::probe::DEFAULT_TRAIN_FRACTION)]
        train_fraction: f64,
        /// Also train a probe on the best layer and save it here.
        #[arg(long)]
        save_probe: Option<PathBuf>,
    },
    /// Patch components with activations recorded on a noise reference.
    Patch {
        #[command(flatten)]
        inputs: InputArgs,
        /// Component id or pattern; repeatable.
        #[arg(long = "component", required = true)]
        components: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = ReferenceArg::WhiteNoise)]
        reference: ReferenceArg,
    },
    /// Zero component outputs.
    Ablate {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long = "component", required = true)]
        components: Vec<String>,
    },
    /// One-component-at-a-time sweep from a TOML spec.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Decode from every encoder depth.
    EncoderLens {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        skip_norm: bool,
        #[arg(long)]
        no_embedding: bool,
    },
    /// Phoneme and semantic similarity of lens candidates, WER, repetition.
    Metrics {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, requires = "lexicon")]
        families: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train a model on one of the built-in toy tasks.
    TrainToy {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Generate inputs from this toy task.
    #[arg(long, value_enum, default_value_t = Task::Copy)]
    task: Task,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Single input from a CSV file (one frame per line) instead.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Decode length cap; defaults to the model's token limit.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Stable,
    FirstMatch,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    TimeMean,
    FinalToken,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    WhiteNoise,
    CalibratedNoise,
}

struct Ctx {
    weights_path: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
    format: Format,
    vocab: Option<PathBuf>,
}

impl Ctx {
    fn weights(&self) -> Result<ModelWeights> {
        let path = self
            .weights_path
            .as_ref()
            .context("--weights is required")?;
        load_weights(path).with_context(|| format!("loading {}", path.display()))
    }

    fn vocab(&self, w: &ModelWeights) -> Result<Vocabulary> {
        match &self.vocab {
            Some(p) => {
                let v = Vocabulary::load(p).with_context(|| format!("loading {}", p.display()))?;
                ensure!(
                    v.len() == w.config.vocab_size,
                    "vocabulary has {} tokens, model has {}",
                    v.len(),
                    w.config.vocab_size
                );
                Ok(v)
            }
            None => Ok(Vocabulary::synthetic(w.config.vocab_size)),
        }
    }

    /// Writes `<out>/<stem>.csv` or `.json`, or prints to stdout.
    fn emit(&self, stem: &str, csv: String, structured: impl Serialize) -> Result<()> {
        let (ext, body) = match self.format {
            Format::Csv => ("csv", csv),
            Format::StructuredText => ("json", serde_json::to_string_pretty(&structured)? + "\n"),
        };
        match &self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{stem}.{ext}"));
                std::fs::write(&path, body)
                    .with_context(|| format!("writing {}", path.display()))?;
                log::info!("wrote {}", path.display());
            }
            None => {
                eprintln!("== {stem} ==");
                print!("{body}");
            }
        }
        Ok(())
    }
}

fn csv_table<I, R>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn load_inputs(ctx: &Ctx, w: &ModelWeights, args: &InputArgs) -> Result<Vec<Labeled>> {
    if let Some(path) = &args.features {
        let x: AudioFeatures = tasks::read_features(path)?;
        x.check_against(&w.config)?;
        return Ok(vec![Labeled {
            input: SweepInput::new(path.display().to_string(), x),
            label: None,
        }]);
    }
    ensure!(args.count > 0, "--count must be positive");
    tasks::generate(args.task, w, args.count, ctx.seed)
}

fn max_len(w: &ModelWeights, args: &InputArgs) -> usize {
    args.max_len.unwrap_or(w.config.max_tokens)
}

fn resolve_components(w: &ModelWeights, specs: &[String]) -> Result<Vec<ComponentId>> {
    let mut out = Vec::new();
    for s in specs {
        let found = if s.contains('*') {
            ComponentPattern(s.clone()).expand(&w.config)?
        } else {
            let c: ComponentId = s.parse()?;
            c.validate(&w.config)?;
            vec![c]
        };
        for c in found {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    Ok(out)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        weights_path: cli.weights,
        seed: cli.seed,
        out: cli.out,
        format: cli.format,
        vocab: cli.vocab,
    };
    match cli.command {
        Command::TrainToy {
            task,
            epochs,
            examples,
            lr,
        } => train_toy(
            &ctx,
            task,
            TrainArgs {
                epochs,
                examples,
                lr,
            },
        ),
        Command::Lens { inputs, k, rule } => lens(&ctx, &inputs, k, rule),
        Command::Probe {
            inputs,
            pooling,
            lambda,
            epochs,
            lr,
            train_fraction,
            save_probe,
        } => {
            let config = ProbeConfig {
                lambda,
                epochs,
                lr,
                seed: ctx.seed,
            };
            probe(
                &ctx,
                &inputs,
                pooling,
                config,
                train_fraction,
                save_probe.as_deref(),
            )
        }
        Command::Patch {
            inputs,
            components,
            alpha,
            reference,
        } => intervene(&ctx, &inputs, &components, Some((alpha, reference))),
        Command::Ablate { inputs, components } => intervene(&ctx, &inputs, &components, None),
        Command::Sweep { spec } => sweep(&ctx, &spec),
        Command::EncoderLens {
            inputs,
            skip_norm,
            no_embedding,
        } => encoder_lens_cmd(
            &ctx,
            &inputs,
            EncoderLensOptions {
                skip_norm,
                include_embedding: !no_embedding,
            },
        ),
        Command::Metrics {
            inputs,
            lexicon,
            families,
            embeddings,
        } => metrics(
            &ctx,
            &inputs,
            lexicon.as_deref(),
            families.as_deref(),
            embeddings.as_deref(),
        ),
    }
}

fn train_toy(ctx: &Ctx, task: Task, args: TrainArgs) -> Result<()> {
    let path = ctx
        .weights_path
        .as_ref()
        .context("--weights names the file to write")?;
    let t = tasks::train(task, ctx.seed, &args)?;
    save_weights(&t.weights, path).with_context(|| format!("writing {}", path.display()))?;
    let first = t.loss_curve.first().copied().unwrap_or(f64::NAN);
    let last = t.loss_curve.last().copied().unwrap_or(f64::NAN);
    let csv = csv_table(
        &[
            "task",
            "seed",
            "epochs",
            "initial_loss",
            "final_loss",
            "digest",
        ],
        [[
            format!("{task:?}").to_lowercase(),
            ctx.seed.to_string(),
            t.loss_curve.len().to_string(),
            format!("{first:.6}"),
            format!("{last:.6}"),
            t.weights.config.digest(),
        ]],
    )?;
    ctx.emit(
        "train",
        csv,
        json!({
            "task": task,
            "seed": ctx.seed,
            "config": t.weights.config,
            "loss_curve": t.loss_curve,
        }),
    )
}

fn lens(ctx: &Ctx, args: &InputArgs, k: usize, rule: RuleArg) -> Result<()> {
    let w = ctx.weights()?;
    let inputs = load_inputs(ctx, &w, args)?;
    let rule = match rule {
        RuleArg::Stable => SaturationRule::Stable,
        RuleArg::FirstMatch => SaturationRule::FirstMatch,
    };
    let reports: Vec<LensReport> = inputs
        .iter()
        .map(|l| lens_run(&w, &l.input.features, max_len(&w, args), k, rule))
        .collect::<asrlens::Result<_>>()?;
    let curve = selected_token_curve(&reports)?;
    ctx.emit("selected_token_curve", curve.to_csv(1), &curve)?;

    let sat = average_saturation(&reports)?;
    let vocab = ctx.vocab(&w)?;
    let mut rows = Vec::new();
    for (l, r) in inputs.iter().zip(&reports) {
        for s in 0..r.n_steps() {
            let mut row = vec![
                l.input.id.clone(),
                s.to_string(),
                vocab.token(r.selected[s]).to_string(),
                r.saturation[s].to_string(),
            ];
            row.extend(r.selected_prob[s].iter().map(|p| format!("{p:.6}")));
            rows.push(row);
        }
    }
    let mut header = vec![
        "input".to_string(),
        "step".into(),
        "selected".into(),
        "saturation".into(),
    ];
    header.extend((1..=w.config.n_dec_layers).map(|l| format!("p_layer{l}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let steps: Vec<_> = inputs
        .iter()
        .zip(&reports)
        .map(|(l, r)| {
            json!({"input": l.input.id, "tokens": r.tokens, "selected": r.selected,
            "saturation": r.saturation, "selected_prob": r.selected_prob})
        })
        .collect();
    ctx.emit(
        "lens_steps",
        csv_table(&header, rows)?,
        json!({ "summary": sat, "steps": steps }),
    )?;
    let sat_csv = csv_table(
        &["per_token", "per_utterance", "n_tokens", "n_utterances"],
        [[
            format!("{:.6}", sat.per_token),
            format!("{:.6}", sat.per_utterance),
            sat.n_tokens.to_string(),
            sat.n_utterances.to_string(),
        ]],
    )?;
    ctx.emit("saturation", sat_csv, &sat)
}

fn probe(
    ctx: &Ctx,
    args: &InputArgs,
    pooling: PoolingArg,
    config: ProbeConfig,
    train_fraction: f64,
    save: Option<&Path>,
) -> Result<()> {
    let w = ctx.weights()?;
    let names = args
        .task
        .label_names()
        .with_context(|| format!("the {:?} task has no labels to probe", args.task))?;
    ensure!(args.features.is_none(), "probing needs labeled task inputs");
    let inputs = load_inputs(ctx, &w, args)?;
    let labeled: Vec<(AudioFeatures, usize)> = inputs
        .iter()
        .map(|l| (l.input.features.clone(), l.label.expect("labeled task")))
        .collect();
    let pooling = match pooling {
        PoolingArg::TimeMean => Pooling::TimeMean,
        PoolingArg::FinalToken => Pooling::FinalToken,
    };
    let opts = SweepOptions {
        probe: config.clone(),
        train_fraction,
        split_seed: ctx.seed,
        max_len: max_len(&w, args),
        final_token: FinalTokenRule::EmitsEos,
    };
    let report = layer_sweep(&w, &labeled, &names, pooling, &opts)?;
    ctx.emit("probe_layers", report.to_csv(), &report)?;
    if let Some(path) = save {
        let layer = report.best_layer().context("no layers probed")?;
        let examples = labeled
            .iter()
            .map(|(x, y)| {
                Ok((
                    probe_trace(&w, x, opts.max_len, opts.final_token)?.vector(layer, pooling)?,
                    *y,
                ))
            })
            .collect::<asrlens::Result<Vec<_>>>()?;
        let ds = ProbeDataset {
            examples,
            label_names: names,
            layer,
            pooling,
        };
        let model = train_probe(&ds, &config)?;
        std::fs::write(path, model.to_json()?)
            .with_context(|| format!("writing {}", path.display()))?;
        log::info!("saved layer {layer} probe to {}", path.display());
    }
    Ok(())
}

fn intervene(
    ctx: &Ctx,
    args: &InputArgs,
    specs: &[String],
    patch: Option<(f64, ReferenceArg)>,
) -> Result<()> {
    let w = ctx.weights()?;
    let inputs = load_inputs(ctx, &w, args)?;
    let comps = resolve_components(&w, specs)?;
    let len = max_len(&w, args);
    let vocab = ctx.vocab(&w)?;
    let calibration = match patch {
        Some((_, ReferenceArg::CalibratedNoise)) => {
            let xs: Vec<AudioFeatures> = inputs.iter().map(|l| l.input.features.clone()).collect();
            NoiseCalibration::from_features(&xs)?
        }
        _ => NoiseCalibration::unit(w.config.feat_dim),
    };
    let mut rows = Vec::new();
    let mut structured = Vec::new();
    for (i, l) in inputs.iter().enumerate() {
        let x = &l.input.features;
        let plan = match patch {
            Some((alpha, _)) => {
                let noise = make_white_noise(
                    &w.config,
                    x.num_frames(),
                    ctx.seed.wrapping_add(i as u64),
                    &calibration,
                )?;
                let (_, records) = record_run(&w, &noise, len, &comps)?;
                InterventionPlan::patch(&comps, alpha, &records)
            }
            None => InterventionPlan::ablate(&comps),
        };
        let base = greedy_decode(&w, x, len)?;
        let (out, _) = run_with_interventions(&w, x, len, &plan)?;
        let wer = |s: &TokenSequence| {
            l.input
                .ground_truth
                .as_ref()
                .and_then(|g| token_wer(&g.ids, &s.ids).ok())
                .map_or(String::new(), |v| format!("{v:.6}"))
        };
        rows.push(vec![
            l.input.id.clone(),
            vocab.decode(&base.ids),
            vocab.decode(&out.ids),
            (base != out).to_string(),
            wer(&base),
            wer(&out),
        ]);
        structured.push(json!({"input": l.input.id, "baseline": base, "intervened": out}));
    }
    let stem = if patch.is_some() { "patch" } else { "ablate" };
    let csv = csv_table(
        &[
            "input",
            "baseline",
            "intervened",
            "changed",
            "baseline_wer",
            "intervened_wer",
        ],
        rows,
    )?;
    ctx.emit(
        stem,
        csv,
        json!({"components": comps, "results": structured}),
    )
}

fn sweep(ctx: &Ctx, path: &Path) -> Result<()> {
    let w = ctx.weights()?;
    let file = spec::SweepFile::load(path)?;
    let spec = file.to_spec(w.config.max_tokens, ctx.seed);
    let inputs: Vec<SweepInput> =
        tasks::generate(file.inputs.task, &w, file.inputs.count, file.inputs.seed)?
            .into_iter()
            .map(|l| l.input)
            .collect();
    let report = run_sweep(&w, &spec, &inputs)?;
    ctx.emit("sweep_ranking", report.to_csv(), &report)?;
    ctx.emit("sweep_coverage", report.coverage_csv(), &report.coverage)?;
    if spec.predicate == asrlens::experiments::Predicate::TargetWordRestored {
        let records = restoration_records(&report, &inputs)?;
        let summary = restoration_accounting(&records, inputs.len());
        ctx.emit(
            "restoration",
            summary.to_csv(),
            json!({"summary": summary, "records": records}),
        )?;
    }
    Ok(())
}

fn encoder_lens_cmd(ctx: &Ctx, args: &InputArgs, opts: EncoderLensOptions) -> Result<()> {
    let w = ctx.weights()?;
    let inputs = load_inputs(ctx, &w, args)?;
    let vocab = ctx.vocab(&w)?;
    let xs: Vec<AudioFeatures> = inputs.iter().map(|l| l.input.features.clone()).collect();
    let (results, ngrams) = encoder_lens_batch(&w, &xs, max_len(&w, args), opts, 1..=3)?;
    let mut rows = Vec::new();
    for (l, r) in inputs.iter().zip(&results) {
        for row in r.render(&vocab) {
            rows.push(vec![
                l.input.id.clone(),
                row.layer.to_string(),
                row.text,
                row.flags.empty.to_string(),
                row.flags.repetition_loop.to_string(),
                row.flags.matches_baseline.to_string(),
            ]);
        }
    }
    let csv = csv_table(
        &[
            "input",
            "layer",
            "text",
            "empty",
            "repetition_loop",
            "matches_baseline",
        ],
        rows,
    )?;
    ctx.emit("encoder_lens", csv, &results)?;
    let csv = csv_table(
        &["ngram", "count", "doc_freq"],
        ngrams.iter().map(|g| {
            vec![
                vocab.decode(&g.ngram),
                g.count.to_string(),
                g.doc_freq.to_string(),
            ]
        }),
    )?;
    ctx.emit("encoder_lens_ngrams", csv, &ngrams)
}

fn metrics(
    ctx: &Ctx,
    args: &InputArgs,
    lexicon: Option<&Path>,
    families: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<()> {
    let w = ctx.weights()?;
    let inputs = load_inputs(ctx, &w, args)?;
    let vocab = ctx.vocab(&w)?;
    let len = max_len(&w, args);
    let reports: Vec<LensReport> = inputs
        .iter()
        .map(|l| {
            lens_run(
                &w,
                &l.input.features,
                len,
                TRAJECTORY_K.min(w.config.vocab_size),
                SaturationRule::Stable,
            )
        })
        .collect::<asrlens::Result<_>>()?;
    let per = match (lexicon, families) {
        (Some(lex), Some(fam)) => Some(layer_per_curve(
            &reports,
            &vocab,
            &PhonemeLexicon::load(lex, fam)?,
        )?),
        (Some(_), None) => bail!("--lexicon needs --families"),
        _ => None,
    };
    let cosine = match embeddings {
        Some(p) => Some(cosine_curve(&reports, &vocab, &EmbeddingTable::load(p)?)?),
        None => None,
    };
    let mut wer = Vec::new();
    let mut repetition = Vec::new();
    let mut rows = Vec::new();
    for (l, r) in inputs.iter().zip(&reports) {
        let verdict = detect_repetition(&r.tokens, REPETITION_N_MAX, REPETITION_MIN_REPEATS);
        let e = l
            .input
            .ground_truth
            .as_ref()
            .and_then(|g| token_wer(&g.ids, &r.tokens).ok());
        rows.push(vec![
            l.input.id.clone(),
            vocab.decode(&r.tokens),
            e.map_or(String::new(), |v| format!("{v:.6}")),
            verdict.repeating.to_string(),
        ]);
        wer.extend(e);
        repetition.push(verdict);
    }
    let report = MetricReport {
        per,
        cosine,
        wer,
        repetition,
    };
    ctx.emit("metrics_layers", report.layer_csv(), &report)?;
    ctx.emit(
        "metrics_utterances",
        csv_table(&["input", "transcript", "wer", "repeating"], rows)?,
        &report.repetition,
    )
}
