//! Component sweeps, restoration accounting and coverage curves.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{
    record_run, run_with_interventions, ComponentId, ComponentPattern, InterventionPlan, Stack,
};
use crate::lens::format_num;
use crate::metrics::{has_repetition, token_wer};
use crate::model::{greedy_decode, AudioFeatures, ModelConfig, ModelWeights, TokenSequence};
use crate::tensor::Matrix;

/// Per-dimension standard deviation for reference noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub std: Vec<f64>,
}

impl NoiseCalibration {
    pub fn unit(feat_dim: usize) -> Self {
        Self {
            std: vec![1.0; feat_dim],
        }
    }

    /// Population std of every feature column over all frames of `set`.
    pub fn from_features(set: &[AudioFeatures]) -> Result<Self> {
        let first = set
            .first()
            .ok_or_else(|| Error::InvalidInput("empty calibration set".into()))?;
        let dim = first.frames().cols();
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for x in set {
            let m = x.frames();
            if m.cols() != dim {
                return Err(Error::Shape(format!(
                    "calibration feature dim {} != {dim}",
                    m.cols()
                )));
            }
            for r in 0..m.rows() {
                for (j, v) in m.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += m.rows();
        }
        let n = n as f64;
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| (q / n - (s / n).powi(2)).max(0.0).sqrt())
            .collect();
        Ok(Self { std })
    }
}

/// Seeded i.i.d. zero-mean Gaussian frames.
pub fn make_white_noise(
    config: &ModelConfig,
    frames: usize,
    seed: u64,
    calibration: &NoiseCalibration,
) -> Result<AudioFeatures> {
    if frames == 0 {
        return Err(Error::InvalidInput(
            "white noise needs at least one frame".into(),
        ));
    }
    if calibration.std.len() != config.feat_dim {
        return Err(Error::Shape(format!(
            "calibration has {} dims, model expects {}",
            calibration.std.len(),
            config.feat_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut m = Matrix::zeros(frames, config.feat_dim);
    for r in 0..frames {
        for (v, s) in m.row_mut(r).iter_mut().zip(&calibration.std) {
            *v = s * unit.sample(&mut rng);
        }
    }
    AudioFeatures::new(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    /// Baseline loops; the intervened output does not, and its WER against
    /// the ground truth is no worse.
    RepetitionSuppressed,
    /// Baseline says the substitute instead of the target; the intervened
    /// output has the target and not the substitute.
    TargetWordRestored,
    OutputChanged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Unit-variance noise.
    WhiteNoise,
    /// Noise matched per dimension to the sweep inputs.
    CalibratedNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SweepMode {
    Ablate,
    Patch {
        alpha: f64,
        reference: ReferenceSource,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepInput {
    pub id: String,
    pub features: AudioFeatures,
    pub ground_truth: Option<TokenSequence>,
    pub target_word: Option<u32>,
    pub substitute: Option<u32>,
}

impl SweepInput {
    pub fn new(id: impl Into<String>, features: AudioFeatures) -> Self {
        Self {
            id: id.into(),
            features,
            ground_truth: None,
            target_word: None,
            substitute: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Patterns such as `dec.*.cross_attn` or `dec.L2.cross_attn.h*`.
    pub components: Vec<ComponentPattern>,
    pub mode: SweepMode,
    pub predicate: Predicate,
    /// Count a target-word restoration only on an exact transcript match.
    pub exact_match: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl SweepSpec {
    /// Expanded components, deduplicated, in canonical order.
    pub fn resolve(&self, config: &ModelConfig) -> Result<Vec<ComponentId>> {
        if self.components.is_empty() {
            return Err(Error::InvalidPlan("sweep has no component patterns".into()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.components {
            seen.extend(p.expand(config)?);
        }
        let canonical = ComponentId::enumerate(config, true);
        Ok(canonical.into_iter().filter(|c| seen.contains(c)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub success: bool,
    pub output: TokenSequence,
    pub wer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: ComponentId,
    pub successes: usize,
    pub applicable: usize,
    pub rate: f64,
    pub mean_wer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageStep {
    pub component: ComponentId,
    pub gain: usize,
    pub covered: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub predicate: Predicate,
    pub mode: SweepMode,
    /// Ids of the inputs the predicate applies to, in input order.
    pub inputs: Vec<String>,
    pub skipped: Vec<String>,
    pub baselines: Vec<TokenSequence>,
    /// Components in canonical order.
    pub components: Vec<ComponentId>,
    /// `outcomes[c][i]` for component `c` and applicable input `i`.
    pub outcomes: Vec<Vec<CellOutcome>>,
    /// Best first.
    pub ranking: Vec<ComponentResult>,
    pub best: Vec<ComponentId>,
    pub coverage: Vec<CoverageStep>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn success_set(&self, component: ComponentId) -> Option<BTreeSet<usize>> {
        let c = self.components.iter().position(|&x| x == component)?;
        Some(
            self.outcomes[c]
                .iter()
                .enumerate()
                .filter(|(_, o)| o.success)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    /// `rank,component,successes,applicable,rate,mean_wer`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,component,successes,applicable,rate,mean_wer\n");
        for (i, r) in self.ranking.iter().enumerate() {
            let wer = r.mean_wer.map(format_num).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                i + 1,
                r.component,
                r.successes,
                r.applicable,
                format_num(r.rate),
                wer
            );
        }
        s
    }

    /// `step,component,gain,covered,fraction`.
    pub fn coverage_csv(&self) -> String {
        let mut s = String::from("step,component,gain,covered,fraction\n");
        for (i, c) in self.coverage.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                i + 1,
                c.component,
                c.gain,
                c.covered,
                format_num(c.fraction)
            );
        }
        s
    }
}

fn applicable(
    predicate: Predicate,
    input: &SweepInput,
    baseline: &TokenSequence,
) -> std::result::Result<(), String> {
    match predicate {
        Predicate::OutputChanged => Ok(()),
        Predicate::RepetitionSuppressed => {
            let gt = input.ground_truth.as_ref().ok_or("no ground truth")?;
            if gt.content().is_empty() {
                return Err("empty ground truth".into());
            }
            if !has_repetition(&baseline.ids) {
                return Err("baseline does not repeat".into());
            }
            Ok(())
        }
        Predicate::TargetWordRestored => {
            let (t, s) = match (input.target_word, input.substitute) {
                (Some(t), Some(s)) => (t, s),
                _ => return Err("no target/substitute word".into()),
            };
            let content = baseline.content();
            if content.contains(&t) || !content.contains(&s) {
                return Err("baseline is not a contextual error".into());
            }
            Ok(())
        }
    }
}

fn judge(
    spec: &SweepSpec,
    input: &SweepInput,
    baseline: &TokenSequence,
    output: &TokenSequence,
) -> bool {
    match spec.predicate {
        Predicate::OutputChanged => output != baseline,
        Predicate::RepetitionSuppressed => {
            let gt = input
                .ground_truth
                .as_ref()
                .expect("checked applicable")
                .ids
                .as_slice();
            let worse = match (token_wer(gt, &output.ids), token_wer(gt, &baseline.ids)) {
                (Ok(a), Ok(b)) => a > b,
                _ => true,
            };
            !has_repetition(&output.ids) && !worse
        }
        Predicate::TargetWordRestored => {
            if spec.exact_match {
                return input.ground_truth.as_ref() == Some(output);
            }
            let content = output.content();
            let (t, s) = (input.target_word.unwrap(), input.substitute.unwrap());
            content.contains(&t) && !content.contains(&s)
        }
    }
}

fn cmp_results(a: &ComponentResult, b: &ComponentResult) -> Ordering {
    b.rate
        .total_cmp(&a.rate)
        .then_with(|| match (a.mean_wer, b.mean_wer) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
        // On a full tie the narrower component is the better localisation.
        .then_with(|| b.component.head.is_some().cmp(&a.component.head.is_some()))
}

/// Intervene on one component at a time over every applicable input.
pub fn run_sweep(
    weights: &ModelWeights,
    spec: &SweepSpec,
    inputs: &[SweepInput],
) -> Result<SweepReport> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("sweep has no inputs".into()));
    }
    if let SweepMode::Patch { alpha, .. } = spec.mode {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidPlan(format!("alpha {alpha} outside [0, 1]")));
        }
    }
    let components = spec.resolve(&weights.config)?;
    let baselines = inputs
        .par_iter()
        .map(|i| greedy_decode(weights, &i.features, spec.max_len))
        .collect::<Result<Vec<_>>>()?;

    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (k, (input, base)) in inputs.iter().zip(&baselines).enumerate() {
        match applicable(spec.predicate, input, base) {
            Ok(()) => kept.push(k),
            Err(why) => {
                log::info!("skipping input {}: {why}", input.id);
                skipped.push(input.id.clone());
            }
        }
    }

    let references = match spec.mode {
        SweepMode::Ablate => None,
        SweepMode::Patch { reference, .. } => {
            let calibration = match reference {
                ReferenceSource::WhiteNoise => NoiseCalibration::unit(weights.config.feat_dim),
                ReferenceSource::CalibratedNoise => {
                    let xs: Vec<AudioFeatures> =
                        inputs.iter().map(|i| i.features.clone()).collect();
                    NoiseCalibration::from_features(&xs)?
                }
            };
            let refs = kept
                .par_iter()
                .map(|&k| {
                    let seed = spec.seed.wrapping_add(k as u64);
                    let noise = make_white_noise(
                        &weights.config,
                        inputs[k].features.num_frames(),
                        seed,
                        &calibration,
                    )?;
                    Ok(record_run(weights, &noise, spec.max_len, &components)?.1)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(refs)
        }
    };

    let cells: Vec<(usize, usize)> = (0..components.len())
        .flat_map(|c| (0..kept.len()).map(move |i| (c, i)))
        .collect();
    let flat = cells
        .par_iter()
        .map(|&(c, i)| {
            let input = &inputs[kept[i]];
            let base = &baselines[kept[i]];
            let plan = match (&spec.mode, &references) {
                (SweepMode::Patch { alpha, .. }, Some(refs)) => {
                    InterventionPlan::patch(&[components[c]], *alpha, &refs[i])
                }
                _ => InterventionPlan::ablate(&[components[c]]),
            };
            let (output, _) =
                run_with_interventions(weights, &input.features, spec.max_len, &plan)?;
            let wer = input
                .ground_truth
                .as_ref()
                .and_then(|g| token_wer(&g.ids, &output.ids).ok());
            Ok(CellOutcome {
                success: judge(spec, input, base, &output),
                output,
                wer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outcomes: Vec<Vec<CellOutcome>> =
        vec![Vec::with_capacity(kept.len()); components.len()];
    for ((c, _), o) in cells.into_iter().zip(flat) {
        outcomes[c].push(o);
    }

    let mut ranking: Vec<ComponentResult> = components
        .iter()
        .zip(&outcomes)
        .map(|(&component, row)| {
            let successes = row.iter().filter(|o| o.success).count();
            let wers: Vec<f64> = row.iter().filter_map(|o| o.wer).collect();
            ComponentResult {
                component,
                successes,
                applicable: row.len(),
                rate: if row.is_empty() {
                    0.0
                } else {
                    successes as f64 / row.len() as f64
                },
                mean_wer: (!wers.is_empty()).then(|| wers.iter().sum::<f64>() / wers.len() as f64),
            }
        })
        .collect();
    ranking.sort_by(cmp_results);
    let best = match ranking.first() {
        Some(top) if top.successes > 0 => ranking
            .iter()
            .take_while(|r| cmp_results(r, top) == Ordering::Equal)
            .map(|r| r.component)
            .collect(),
        _ => Vec::new(),
    };

    let sets: Vec<(ComponentId, BTreeSet<usize>)> = ranking
        .iter()
        .map(|r| {
            let c = components.iter().position(|&x| x == r.component).unwrap();
            let set = outcomes[c]
                .iter()
                .enumerate()
                .filter(|(_, o)| o.success)
                .map(|(i, _)| i)
                .collect();
            (r.component, set)
        })
        .filter(|(_, s): &(ComponentId, BTreeSet<usize>)| !s.is_empty())
        .collect();
    let coverage = cumulative_coverage(&sets, kept.len());

    Ok(SweepReport {
        predicate: spec.predicate,
        mode: spec.mode,
        inputs: kept.iter().map(|&k| inputs[k].id.clone()).collect(),
        skipped,
        baselines: kept.iter().map(|&k| baselines[k].clone()).collect(),
        components,
        outcomes,
        ranking,
        best,
        coverage,
    })
}

/// Greedy union curve: each step takes the set with the largest marginal
/// gain, ties going to the earlier set. Every set appears once.
pub fn cumulative_coverage(
    sets: &[(ComponentId, BTreeSet<usize>)],
    universe: usize,
) -> Vec<CoverageStep> {
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    let mut left: Vec<usize> = (0..sets.len()).collect();
    let mut out = Vec::with_capacity(sets.len());
    while !left.is_empty() {
        let (pos, gain) = left
            .iter()
            .enumerate()
            .map(|(p, &i)| (p, sets[i].1.difference(&covered).count()))
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let i = left.remove(pos);
        covered.extend(&sets[i].1);
        out.push(CoverageStep {
            component: sets[i].0,
            gain,
            covered: covered.len(),
            fraction: if universe == 0 {
                0.0
            } else {
                covered.len() as f64 / universe as f64
            },
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationRecord {
    pub input_id: String,
    pub baseline: TokenSequence,
    /// Output under the first restoring component, else the baseline.
    pub intervened: TokenSequence,
    pub target_word: u32,
    pub restored: bool,
    pub restored_by: Vec<ComponentId>,
}

/// Per-error-case records from a target-word-restoration sweep.
pub fn restoration_records(
    report: &SweepReport,
    inputs: &[SweepInput],
) -> Result<Vec<RestorationRecord>> {
    if report.predicate != Predicate::TargetWordRestored {
        return Err(Error::InvalidInput(
            "restoration records need a target_word_restored sweep".into(),
        ));
    }
    report
        .inputs
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let input = inputs
                .iter()
                .find(|x| &x.id == id)
                .ok_or_else(|| Error::InvalidInput(format!("input {id} missing")))?;
            let restored_by: Vec<ComponentId> = report
                .components
                .iter()
                .zip(&report.outcomes)
                .filter(|(_, row)| row[i].success)
                .map(|(&c, _)| c)
                .collect();
            let intervened = report
                .components
                .iter()
                .position(|c| restored_by.first() == Some(c))
                .map_or_else(
                    || report.baselines[i].clone(),
                    |c| report.outcomes[c][i].output.clone(),
                );
            Ok(RestorationRecord {
                input_id: id.clone(),
                baseline: report.baselines[i].clone(),
                intervened,
                target_word: input.target_word.expect("applicable inputs carry a target"),
                restored: !restored_by.is_empty(),
                restored_by,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RestorationSummary {
    pub total_inputs: usize,
    pub error_cases: usize,
    pub restored: usize,
    pub via_encoder: usize,
    pub via_decoder: usize,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

impl RestorationSummary {
    /// `row,count,denominator,percent`.
    pub fn to_csv(&self) -> String {
        let rows = [
            ("error_cases", self.error_cases, self.total_inputs),
            ("restored", self.restored, self.error_cases),
            ("via_encoder", self.via_encoder, self.error_cases),
            ("via_decoder", self.via_decoder, self.error_cases),
        ];
        let mut s = String::from("row,count,denominator,percent\n");
        for (name, n, d) in rows {
            let _ = writeln!(s, "{name},{n},{d},{:.1}", pct(n, d));
        }
        s
    }
}

/// Table-shaped totals. A case counts once in `restored` even when both
/// stacks restore it, so `via_encoder + via_decoder` may exceed it.
pub fn restoration_accounting(
    records: &[RestorationRecord],
    total_inputs: usize,
) -> RestorationSummary {
    let has = |r: &RestorationRecord, s: Stack| r.restored_by.iter().any(|c| c.stack == s);
    RestorationSummary {
        total_inputs,
        error_cases: records.len(),
        restored: records.iter().filter(|r| r.restored).count(),
        via_encoder: records.iter().filter(|r| has(r, Stack::Encoder)).count(),
        via_decoder: records.iter().filter(|r| has(r, Stack::Decoder)).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::ComponentKind;
    use crate::model::BOS;

    fn c(layer: usize) -> ComponentId {
        ComponentId::dec(layer, ComponentKind::FeedForward)
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn coverage_examples() {
        let f = |s: &[CoverageStep]| s.iter().map(|x| x.fraction).collect::<Vec<_>>();
        assert_eq!(
            f(&cumulative_coverage(
                &[(c(1), set(&[0, 1, 2])), (c(2), set(&[5, 6]))],
                10
            )),
            [0.3, 0.5]
        );
        let same = cumulative_coverage(&[(c(1), set(&[1, 2])), (c(2), set(&[1, 2]))], 4);
        assert_eq!(same[1].gain, 0);
        assert_eq!(
            f(&cumulative_coverage(
                &[(c(1), set(&[0, 1, 2])), (c(2), set(&[1, 2, 3]))],
                5
            )),
            [0.6, 0.8]
        );
        let greedy = cumulative_coverage(&[(c(1), set(&[0])), (c(2), set(&[1, 2, 3]))], 4);
        assert_eq!(greedy[0].component, c(2));
    }

    #[test]
    fn noise_is_seeded_and_centred() {
        let cfg = ModelConfig::micro(1);
        let cal = NoiseCalibration::unit(cfg.feat_dim);
        let a = make_white_noise(&cfg, 4, 9, &cal).unwrap();
        assert_eq!(a, make_white_noise(&cfg, 4, 9, &cal).unwrap());
        assert_ne!(a, make_white_noise(&cfg, 4, 10, &cal).unwrap());
        assert_eq!(make_white_noise(&cfg, 1, 9, &cal).unwrap().num_frames(), 1);
        assert!(make_white_noise(&cfg, 0, 9, &cal).is_err());
        let mut big = ModelConfig::micro(1);
        big.max_frames = 2000;
        let n = make_white_noise(&big, 10_000 / cfg.feat_dim + 1, 3, &cal).unwrap();
        let vals = &n.frames().as_slice()[..10_000];
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn calibration_matches_columns() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![1.0, 4.0],
            vec![-1.0, 4.0],
        ])
        .unwrap();
        let cal = NoiseCalibration::from_features(&[AudioFeatures::new(m).unwrap()]).unwrap();
        assert_eq!(cal.std, vec![1.0, 2.0]);
    }

    fn rec(by: Vec<ComponentId>) -> RestorationRecord {
        RestorationRecord {
            input_id: "x".into(),
            baseline: TokenSequence::new(vec![BOS]),
            intervened: TokenSequence::new(vec![BOS]),
            target_word: 5,
            restored: !by.is_empty(),
            restored_by: by,
        }
    }

    #[test]
    fn accounting() {
        assert_eq!(
            restoration_accounting(&[], 0),
            RestorationSummary::default()
        );
        let enc = ComponentId::enc(1, ComponentKind::FeedForward);
        let s = restoration_accounting(&[rec(vec![enc]), rec(vec![enc]), rec(vec![])], 10);
        assert_eq!(
            (s.error_cases, s.restored, s.via_encoder, s.via_decoder),
            (3, 2, 2, 0)
        );
    }

    /// The published row: 136 restored, 130 via encoder, 126 via decoder
    /// forces 120 cases restored by both.
    #[test]
    fn published_row_shape() {
        let enc = ComponentId::enc(1, ComponentKind::FeedForward);
        let dec = c(1);
        let mut records = Vec::new();
        records.extend((0..120).map(|_| rec(vec![enc, dec])));
        records.extend((0..10).map(|_| rec(vec![enc])));
        records.extend((0..6).map(|_| rec(vec![dec])));
        records.extend((0..17).map(|_| rec(vec![])));
        let s = restoration_accounting(&records, 700);
        assert_eq!(
            (s.error_cases, s.restored, s.via_encoder, s.via_decoder),
            (153, 136, 130, 126)
        );
        let csv = s.to_csv();
        assert!(csv.contains("restored,136,153,88.9"));
        assert!(csv.contains("via_encoder,130,153,85.0"));
        assert!(csv.contains("via_decoder,126,153,82.4"));
        assert!(csv.contains("error_cases,153,700,21.9"));
    }
}
