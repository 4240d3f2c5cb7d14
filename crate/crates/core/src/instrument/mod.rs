//! Recording, patching and ablation of internal activations.
//!
//! Intervention points are component outputs: attention after the output
//! projection, feed-forward after its second linear map, both before the
//! residual add. Head-level addresses act on the head's segment of the
//! concatenated attention output, before the output projection. The
//! residual stream address is the post-layer residual.

mod component;
pub mod trace_file;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

pub use component::{ComponentId, ComponentKind, ComponentPattern, Stack};

use crate::error::{Error, Result};
use crate::model::{forward, AudioFeatures, ForwardHook, ModelWeights, Phase, TokenSequence};
use crate::tensor::Matrix;

/// One recorded activation. Encoder records cover every frame (`F × d`,
/// step 0); decoder records hold the row computed at `step` (`1 × d`, or
/// `1 × d/n_heads` for a head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub component: ComponentId,
    pub step: usize,
    pub tensor: Matrix,
    /// For component-level attention records: the concatenated per-head
    /// output before the output projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_projection: Option<HeadOutputs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadOutputs {
    pub n_heads: usize,
    pub concat: Matrix,
}

impl HeadOutputs {
    pub fn head_dim(&self) -> usize {
        self.concat.cols() / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InterventionMode {
    /// Blend toward recorded reference activations. Decoder references are
    /// matched to target steps by step index.
    Patch {
        alpha: f64,
        reference: Vec<ActivationRecord>,
    },
    Ablate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub component: ComponentId,
    pub mode: InterventionMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum StepScope {
    #[default]
    AllSteps,
    Steps(Vec<usize>),
}

impl StepScope {
    pub fn contains(&self, step: usize) -> bool {
        match self {
            StepScope::AllSteps => true,
            StepScope::Steps(s) => s.contains(&step),
        }
    }
}

/// A set of directives applied during one forward run. Decoder directives
/// honour `step_scope`; the encoder runs once and is always in scope.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub directives: Vec<Directive>,
    pub step_scope: StepScope,
}

pub const DEFAULT_ALPHA: f64 = 1.0;

impl InterventionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn ablate(components: &[ComponentId]) -> Self {
        Self {
            directives: components
                .iter()
                .map(|&component| Directive {
                    component,
                    mode: InterventionMode::Ablate,
                })
                .collect(),
            step_scope: StepScope::AllSteps,
        }
    }

    /// Patch each component from the records for it in `reference`.
    pub fn patch(components: &[ComponentId], alpha: f64, reference: &[ActivationRecord]) -> Self {
        Self {
            directives: components
                .iter()
                .map(|&component| Directive {
                    component,
                    mode: InterventionMode::Patch {
                        alpha,
                        reference: reference
                            .iter()
                            .filter(|r| r.component == component)
                            .cloned()
                            .collect(),
                    },
                })
                .collect(),
            step_scope: StepScope::AllSteps,
        }
    }

    pub fn with_scope(mut self, scope: StepScope) -> Self {
        self.step_scope = scope;
        self
    }

    pub fn validate(&self, weights: &ModelWeights) -> Result<()> {
        let cfg = &weights.config;
        let mut seen = HashSet::new();
        for d in &self.directives {
            d.component.validate(cfg)?;
            if !seen.insert(d.component) {
                return Err(Error::InvalidPlan(format!(
                    "more than one directive for {}",
                    d.component
                )));
            }
            if let InterventionMode::Patch { alpha, reference } = &d.mode {
                if !(alpha.is_finite() && *alpha >= 0.0) {
                    return Err(Error::InvalidPlan(format!(
                        "alpha {alpha} must be finite and >= 0"
                    )));
                }
                let mut steps = HashSet::new();
                for r in reference {
                    if r.component != d.component {
                        return Err(Error::InvalidPlan(format!(
                            "reference for {} attached to directive for {}",
                            r.component, d.component
                        )));
                    }
                    if !steps.insert(r.step) {
                        return Err(Error::InvalidPlan(format!(
                            "duplicate reference step {} for {}",
                            r.step, d.component
                        )));
                    }
                    let width = if d.component.head.is_some() {
                        cfg.head_dim()
                    } else {
                        cfg.d_model
                    };
                    let rows_ok = match d.component.stack {
                        Stack::Decoder => r.tensor.rows() == 1,
                        Stack::Encoder => r.tensor.rows() >= 1,
                    };
                    if r.tensor.cols() != width || !rows_ok {
                        return Err(Error::Shape(format!(
                            "reference for {} has shape {:?}",
                            d.component,
                            r.tensor.shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(1 − α)·a_orig + α·a_ref`, elementwise. α = 0 and α = 1 return the
/// corresponding operand exactly.
pub fn blend(
    orig: &ActivationRecord,
    reference: &ActivationRecord,
    alpha: f64,
) -> Result<ActivationRecord> {
    if orig.tensor.shape() != reference.tensor.shape() {
        return Err(Error::Shape(format!(
            "cannot blend {:?} with {:?}",
            orig.tensor.shape(),
            reference.tensor.shape()
        )));
    }
    Ok(ActivationRecord {
        component: orig.component,
        step: orig.step,
        tensor: blend_matrix(&orig.tensor, &reference.tensor, alpha),
        pre_projection: None,
    })
}

fn blend_matrix(orig: &Matrix, reference: &Matrix, alpha: f64) -> Matrix {
    if alpha == 0.0 {
        return orig.clone();
    }
    if alpha == 1.0 {
        return reference.clone();
    }
    let mut out = orig.clone();
    for (o, r) in out.as_mut_slice().iter_mut().zip(reference.as_slice()) {
        *o = (1.0 - alpha) * *o + alpha * r;
    }
    out
}

fn blend_row(row: &mut [f64], reference: &[f64], alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    if alpha == 1.0 {
        row.copy_from_slice(reference);
        return;
    }
    for (o, r) in row.iter_mut().zip(reference) {
        *o = (1.0 - alpha) * *o + alpha * r;
    }
}

/// Per-head segment of an attention record's pre-projection output.
pub fn head_slice(record: &ActivationRecord, head: usize) -> Result<ActivationRecord> {
    if !record.component.kind.is_attention() {
        return Err(Error::InvalidComponent(format!(
            "{} is not an attention component",
            record.component
        )));
    }
    let heads = record.pre_projection.as_ref().ok_or_else(|| {
        Error::InvalidComponent(format!(
            "record for {} carries no pre-projection output",
            record.component
        ))
    })?;
    if head >= heads.n_heads {
        return Err(Error::InvalidComponent(format!(
            "head {head} out of range (< {})",
            heads.n_heads
        )));
    }
    let dh = heads.head_dim();
    Ok(ActivationRecord {
        component: record.component.without_head().with_head(head),
        step: record.step,
        tensor: heads.concat.slice_cols(head * dh, dh),
        pre_projection: None,
    })
}

/// Per-step L2 norms for one component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub component: ComponentId,
    pub norms: Vec<f64>,
}

pub fn norm_trace(records: &[ActivationRecord]) -> Result<NormTrace> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput("no records to trace".into()))?;
    if let Some(other) = records.iter().find(|r| r.component != first.component) {
        return Err(Error::InvalidInput(format!(
            "mixed components {} and {}",
            first.component, other.component
        )));
    }
    let mut sorted: Vec<&ActivationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.step);
    Ok(NormTrace {
        component: first.component,
        norms: sorted.iter().map(|r| r.tensor.frobenius_norm()).collect(),
    })
}

/// Hook that applies a plan and records taps.
struct Instrument<'a> {
    plan: Option<&'a InterventionPlan>,
    n_heads: usize,
    taps: HashSet<ComponentId>,
    records: Vec<ActivationRecord>,
    phase: Phase,
    /// reference rows per component, keyed by step
    references: BTreeMap<ComponentId, BTreeMap<usize, &'a Matrix>>,
    /// pre-projection outputs of tapped attention components, waiting for
    /// the matching output record
    pending_pre: BTreeMap<ComponentId, Matrix>,
}

impl<'a> Instrument<'a> {
    fn new(plan: Option<&'a InterventionPlan>, taps: &[ComponentId], n_heads: usize) -> Self {
        let mut references: BTreeMap<ComponentId, BTreeMap<usize, &'a Matrix>> = BTreeMap::new();
        if let Some(plan) = plan {
            for d in &plan.directives {
                if let InterventionMode::Patch { reference, .. } = &d.mode {
                    let entry = references.entry(d.component).or_default();
                    for r in reference {
                        entry.insert(r.step, &r.tensor);
                    }
                }
            }
        }
        Self {
            plan,
            n_heads,
            taps: taps.iter().copied().collect(),
            records: Vec::new(),
            phase: Phase::Encoder,
            references,
            pending_pre: BTreeMap::new(),
        }
    }

    fn directive(&self, component: ComponentId) -> Option<&'a Directive> {
        self.plan?
            .directives
            .iter()
            .find(|d| d.component == component)
    }

    /// Apply the directive for `component`, if any, to columns
    /// `col0..col0 + width` of `m`.
    fn intervene(&self, component: ComponentId, m: &mut Matrix, col0: usize, width: usize) {
        let Some(d) = self.directive(component) else {
            return;
        };
        let scope = &self.plan.expect("directive implies plan").step_scope;
        let refs = self.references.get(&component);
        match self.phase {
            Phase::Encoder => match &d.mode {
                InterventionMode::Ablate => {
                    for r in 0..m.rows() {
                        m.row_mut(r)[col0..col0 + width].fill(0.0);
                    }
                }
                InterventionMode::Patch { alpha, .. } => {
                    let Some(reference) = refs.and_then(|r| r.get(&0)) else {
                        return;
                    };
                    // Frame-count mismatch: truncate or zero-pad the reference.
                    let fitted = reference.fit_rows(m.rows());
                    for r in 0..m.rows() {
                        blend_row(&mut m.row_mut(r)[col0..col0 + width], fitted.row(r), *alpha);
                    }
                }
            },
            Phase::Decoder { .. } => {
                // Row `pos` of a decoder activation is the one produced at step `pos`.
                for pos in 0..m.rows() {
                    if !scope.contains(pos) {
                        continue;
                    }
                    let row = &mut m.row_mut(pos)[col0..col0 + width];
                    match &d.mode {
                        InterventionMode::Ablate => row.fill(0.0),
                        InterventionMode::Patch { alpha, .. } => {
                            if let Some(reference) = refs.and_then(|r| r.get(&pos)) {
                                blend_row(row, reference.row(0), *alpha);
                            }
                        }
                    }
                }
            }
        }
    }

    fn step(&self) -> usize {
        match self.phase {
            Phase::Encoder => 0,
            Phase::Decoder { step } => step,
        }
    }

    /// Rows this phase contributes to a record: all frames for the
    /// encoder, only the newest position for the decoder.
    fn capture(&self, m: &Matrix, col0: usize, width: usize) -> Matrix {
        let rows = match self.phase {
            Phase::Encoder => m.clone(),
            Phase::Decoder { .. } => m.slice_rows(m.rows() - 1, m.rows()),
        };
        if col0 == 0 && width == rows.cols() {
            rows
        } else {
            rows.slice_cols(col0, width)
        }
    }
}

impl ForwardHook for Instrument<'_> {
    fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    fn on_heads(&mut self, component: ComponentId, concat: &mut Matrix) {
        let dh = concat.cols() / self.n_heads;
        for h in 0..self.n_heads {
            let id = component.with_head(h);
            self.intervene(id, concat, h * dh, dh);
        }
        for h in 0..self.n_heads {
            let id = component.with_head(h);
            if self.taps.contains(&id) {
                let tensor = self.capture(concat, h * dh, dh);
                self.records.push(ActivationRecord {
                    component: id,
                    step: self.step(),
                    tensor,
                    pre_projection: None,
                });
            }
        }
        if self.taps.contains(&component) {
            let pre = self.capture(concat, 0, concat.cols());
            self.pending_pre.insert(component, pre);
        }
    }

    fn on_output(&mut self, component: ComponentId, activation: &mut Matrix) {
        let width = activation.cols();
        self.intervene(component, activation, 0, width);
        if self.taps.contains(&component) {
            let tensor = self.capture(activation, 0, width);
            let n_heads = self.n_heads;
            self.records.push(ActivationRecord {
                component,
                step: self.step(),
                tensor,
                pre_projection: self
                    .pending_pre
                    .remove(&component)
                    .map(|concat| HeadOutputs { n_heads, concat }),
            });
        }
    }
}

fn validate_taps(weights: &ModelWeights, taps: &[ComponentId]) -> Result<()> {
    taps.iter().try_for_each(|t| t.validate(&weights.config))
}

/// Greedy decode while recording the outputs of `taps`. Recording never
/// changes the computation.
pub fn record_run(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
    taps: &[ComponentId],
) -> Result<(TokenSequence, Vec<ActivationRecord>)> {
    validate_taps(weights, taps)?;
    let mut hook = Instrument::new(None, taps, weights.config.n_heads);
    let (seq, _) = forward::greedy_decode_hooked(weights, features, max_len, &mut hook)?;
    Ok((seq, hook.records))
}

/// Full result of an instrumented run.
#[derive(Clone, Debug)]
pub struct InstrumentedRun {
    pub tokens: TokenSequence,
    pub records: Vec<ActivationRecord>,
    pub steps: Vec<forward::DecodeStep>,
}

/// Greedy decode under `plan`, recording `taps` (records reflect the
/// intervened values).
pub fn run_instrumented(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
    plan: &InterventionPlan,
    taps: &[ComponentId],
) -> Result<InstrumentedRun> {
    plan.validate(weights)?;
    validate_taps(weights, taps)?;
    let mut hook = Instrument::new(Some(plan), taps, weights.config.n_heads);
    let (tokens, steps) = forward::greedy_decode_hooked(weights, features, max_len, &mut hook)?;
    Ok(InstrumentedRun {
        tokens,
        records: hook.records,
        steps,
    })
}

/// Greedy decode under `plan`. Records are taken for every component the
/// plan touches.
pub fn run_with_interventions(
    weights: &ModelWeights,
    features: &AudioFeatures,
    max_len: usize,
    plan: &InterventionPlan,
) -> Result<(TokenSequence, Vec<ActivationRecord>)> {
    let taps: Vec<ComponentId> = plan.directives.iter().map(|d| d.component).collect();
    let run = run_instrumented(weights, features, max_len, plan, &taps)?;
    Ok((run.tokens, run.records))
}

/// Greedy decode from a precomputed encoder output under `plan`; only
/// decoder directives can take effect.
pub fn decode_with_interventions(
    weights: &ModelWeights,
    encoder_out: &Matrix,
    max_len: usize,
    plan: &InterventionPlan,
) -> Result<TokenSequence> {
    plan.validate(weights)?;
    let mut hook = Instrument::new(Some(plan), &[], weights.config.n_heads);
    Ok(forward::greedy_from_encoder(weights, encoder_out, max_len, &mut hook)?.0)
}

#[cfg(test)]
mod tests;
