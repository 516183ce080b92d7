//! Attribute anonymization by box-constrained additive perturbation.
//!
//! The anonymized image is `T = (tanh(I + w) + 1) / 2`, which keeps every
//! pixel strictly inside `(0, 1)` without projection. The perturbation `w` is
//! found by Adam on
//!
//! ```text
//! L(w) = sum_U max(-c, max_{k != j} s_k(T) - s_j(T))      attribute terms
//!      + lambda_dist * ||I - T||^2                         distortion
//!      + lambda_id * ||Id(I) - Id(T)||                     identity (optional)
//! ```
//!
//! where `s` are the softmax scores (or logits) of attribute `U`'s head and
//! `j` is the class the head should report: the true class for preserved
//! attributes, a fixed target or the best non-true class for suppressed ones.
//! The inner max excludes `j`; including it would keep the term nonnegative
//! and make the `-c` floor unreachable.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{AttributeSchema, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::{self, float_or_inf};
use crate::nn::{identity_distance, AttributeModel, IdentityModel};
use crate::tape::{Tape, Var};
use crate::tenfile;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "class")]
pub enum TargetMode {
    /// Any class other than the true one; chases the best rival each step.
    AnyOther,
    /// A specific class, which must differ from the true class.
    Class(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Suppress(TargetMode),
    Preserve,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSpace {
    #[default]
    Probability,
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityOptions {
    pub weight: f64,
    /// Maximum white-box embedding distance that still counts as the same
    /// identity.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub suppress: BTreeMap<usize, TargetMode>,
    pub preserve: BTreeSet<usize>,
    pub confidence: f64,
    pub distortion_weight: f64,
    pub identity: Option<IdentityOptions>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub score_space: ScoreSpace,
    pub box_epsilon: f64,
    /// Recorded with the results; the attack itself is deterministic and draws
    /// no random numbers.
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            suppress: BTreeMap::new(),
            preserve: BTreeSet::new(),
            confidence: 0.0,
            distortion_weight: 1.0,
            identity: None,
            iterations: 10_000,
            learning_rate: 0.01,
            score_space: ScoreSpace::Probability,
            box_epsilon: 1e-6,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let k = schema.len();
        for (&i, mode) in &self.suppress {
            if i >= k {
                return Err(Error::Config(format!("suppressed attribute {i} outside schema of {k}")));
            }
            if let TargetMode::Class(j) = mode {
                if *j >= schema.classes(i) {
                    return Err(Error::Config(format!(
                        "target class {j} outside the {} classes of {:?}",
                        schema.classes(i),
                        schema.name(i)
                    )));
                }
            }
        }
        if let Some(&i) = self.preserve.iter().find(|&&i| i >= k) {
            return Err(Error::Config(format!("preserved attribute {i} outside schema of {k}")));
        }
        if let Some(&i) = self.preserve.iter().find(|i| self.suppress.contains_key(i)) {
            return Err(Error::Config(format!(
                "attribute {:?} is both suppressed and preserved",
                schema.name(i)
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Config(format!("confidence must be in [0, 1], got {}", self.confidence)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.box_epsilon > 0.0 && self.box_epsilon < 0.5) {
            return Err(Error::Config(format!("box epsilon must be in (0, 0.5), got {}", self.box_epsilon)));
        }
        if !(self.distortion_weight >= 0.0) {
            return Err(Error::Config("distortion weight must be nonnegative".into()));
        }
        if let Some(id) = &self.identity {
            if !(id.weight >= 0.0 && id.threshold >= 0.0) {
                return Err(Error::Config("identity weight and threshold must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Constrained attributes in index order.
    pub fn roles(&self) -> Vec<(usize, Role)> {
        let mut out: Vec<(usize, Role)> = self
            .suppress
            .iter()
            .map(|(&i, &m)| (i, Role::Suppress(m)))
            .chain(self.preserve.iter().map(|&i| (i, Role::Preserve)))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }

    pub fn role_of(&self, attribute: usize) -> Option<Role> {
        if let Some(m) = self.suppress.get(&attribute) {
            Some(Role::Suppress(*m))
        } else if self.preserve.contains(&attribute) {
            Some(Role::Preserve)
        } else {
            None
        }
    }
}

/// `w0` with `reparameterize(I, w0) = clamp(I, eps, 1 - eps)`.
pub fn init_perturbation(image: &Tensor, box_epsilon: f64) -> Tensor {
    image.map(|i| {
        let c = i.clamp(box_epsilon, 1.0 - box_epsilon);
        (2.0 * c - 1.0).atanh() - i
    })
}

/// `T = (tanh(I + w) + 1) / 2`.
pub fn reparameterize(image: &Tensor, w: &Tensor) -> Result<Tensor> {
    image.zip_map(w, |i, w| 0.5 * ((i + w).tanh() + 1.0))
}

/// Rounds to `f32` for storage while keeping the value strictly inside (0, 1).
pub fn quantize_interior(x: f64) -> f64 {
    let q = x as f32;
    let q = if q >= 1.0 {
        1.0f32.next_down()
    } else if q <= 0.0 {
        0.0f32.next_up()
    } else {
        q
    };
    q as f64
}

fn check_class(scores: &[f64], class: usize) -> Result<()> {
    if class >= scores.len() || scores.len() < 2 {
        return Err(Error::Domain {
            op: "attribute_objective",
            detail: format!("class {class} invalid for {} scores", scores.len()),
        });
    }
    Ok(())
}

/// The class the head should report under `role`.
pub fn target_class(scores: &[f64], true_class: usize, role: Role) -> Result<usize> {
    check_class(scores, true_class)?;
    Ok(match role {
        Role::Preserve => true_class,
        Role::Suppress(TargetMode::Class(j)) => {
            check_class(scores, j)?;
            j
        }
        Role::Suppress(TargetMode::AnyOther) => best_rival(scores, true_class),
    })
}

/// Highest-scoring class other than `excluded`; lowest index wins ties.
pub fn best_rival(scores: &[f64], excluded: usize) -> usize {
    let mut best = if excluded == 0 { 1 } else { 0 };
    for (k, &s) in scores.iter().enumerate() {
        if k != excluded && s > scores[best] {
            best = k;
        }
    }
    best
}

/// `s_target - max_{k != target} s_k`.
pub fn margin(scores: &[f64], target: usize) -> f64 {
    scores[target] - scores[best_rival(scores, target)]
}

/// `max(-c, max_{k != j} s_k - s_j)` with `j` from [`target_class`].
pub fn attribute_objective(scores: &[f64], true_class: usize, role: Role, confidence: f64) -> Result<f64> {
    let j = target_class(scores, true_class, role)?;
    Ok((-margin(scores, j)).max(-confidence))
}

fn attribute_objective_on_tape(
    tape: &mut Tape,
    scores: Var,
    true_class: usize,
    role: Role,
    confidence: f64,
) -> Result<Var> {
    let values = tape.value(scores).data().to_vec();
    let j = target_class(&values, true_class, role)?;
    let rival = best_rival(&values, j);
    let s_rival = tape.gather(scores, &[rival])?;
    let s_target = tape.gather(scores, &[j])?;
    let gap = tape.sub(s_rival, s_target)?;
    tape.max_const(gap, -confidence)
}

/// Identity term inputs: the white-box embedder and the embedding of `I`.
#[derive(Clone, Copy)]
pub struct IdentityAnchor<'a> {
    pub model: &'a dyn IdentityModel,
    pub reference: &'a Tensor,
}

/// Everything the objective needs besides `w`.
pub struct Objective<'a> {
    pub image: &'a Tensor,
    pub labels: &'a [usize],
    pub spec: &'a AttackSpec,
    pub model: &'a dyn AttributeModel,
    pub identity: Option<IdentityAnchor<'a>>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub total: f64,
    pub attribute_terms: Vec<(usize, f64)>,
    pub distortion: f64,
    pub identity_distance: Option<f64>,
    /// Per-attribute scores at `T(w)` in the configured score space.
    pub scores: Vec<Vec<f64>>,
    pub gradient: Tensor,
}

fn add_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

impl Objective<'_> {
    /// Value and gradient with respect to `w`.
    pub fn evaluate(&self, w: &Tensor) -> Result<ObjectiveValue> {
        if w.dims() != self.image.dims() {
            return Err(Error::shape("total_objective", self.image.dims(), w.dims()));
        }
        let d = self.image.len();
        let mut tape = Tape::new();
        let wv = tape.variable(w.clone());
        let iv = tape.constant(self.image.clone());
        let x = tape.add(iv, wv)?;
        let th = tape.tanh(x)?;
        let half = tape.scale(th, 0.5)?;
        let t = tape.shift(half, 0.5)?;
        let flat = tape.reshape(t, &[d])?;

        let logits = self.model.logits(&mut tape, flat)?;
        let score_vars = match self.spec.score_space {
            ScoreSpace::Probability => logits
                .iter()
                .map(|&l| tape.softmax(l))
                .collect::<Result<Vec<_>>>()?,
            ScoreSpace::Logit => logits,
        };

        let mut terms = Vec::new();
        let mut attribute_terms = Vec::new();
        for (i, role) in self.spec.roles() {
            let term = attribute_objective_on_tape(
                &mut tape,
                score_vars[i],
                self.labels[i],
                role,
                self.spec.confidence,
            )?;
            attribute_terms.push((i, tape.value(term).item()?));
            terms.push(term);
        }

        let diff = tape.sub(iv, t)?;
        let sq = tape.squared_norm(diff)?;
        let distortion = tape.value(sq).item()?;
        terms.push(tape.scale(sq, self.spec.distortion_weight)?);

        let mut identity_distance = None;
        if let (Some(opts), Some(anchor)) = (&self.spec.identity, &self.identity) {
            let e = anchor.model.embed_on_tape(&mut tape, flat)?;
            let r = tape.constant(anchor.reference.clone());
            let delta = tape.sub(e, r)?;
            let sq = tape.squared_norm(delta)?;
            let dist = tape.sqrt(sq)?;
            identity_distance = Some(tape.value(dist).item()?);
            terms.push(tape.scale(dist, opts.weight)?);
        }

        let root = add_terms(&mut tape, &terms)?;
        let total = tape.value(root).item()?;
        let scores = score_vars
            .iter()
            .map(|&s| tape.value(s).data().to_vec())
            .collect();
        let mut grads = tape.backward(root)?;
        let gradient = grads.take(wv).expect("w is trainable");
        Ok(ObjectiveValue {
            total,
            attribute_terms,
            distortion,
            identity_distance,
            scores,
            gradient,
        })
    }
}

/// Total objective at `w` without the gradient bookkeeping.
pub fn total_objective(objective: &Objective<'_>, w: &Tensor) -> Result<f64> {
    Ok(objective.evaluate(w)?.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVerdict {
    pub attribute: usize,
    pub role: Role,
    pub predicted: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityVerdict {
    pub distance: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub attributes: Vec<AttributeVerdict>,
    pub identity: Option<IdentityVerdict>,
    pub feasible: bool,
}

/// Feasibility from per-attribute scores (argmax only) and an optional
/// identity distance. The identity check is inclusive: `distance <= tau`.
pub fn verdict_from_scores(
    scores: &[Vec<f64>],
    labels: &[usize],
    spec: &AttackSpec,
    identity: Option<(f64, f64)>,
) -> Verdict {
    let attributes: Vec<AttributeVerdict> = spec
        .roles()
        .into_iter()
        .map(|(i, role)| {
            let predicted = argmax(&scores[i]);
            let pass = match role {
                Role::Preserve => predicted == labels[i],
                Role::Suppress(TargetMode::AnyOther) => predicted != labels[i],
                Role::Suppress(TargetMode::Class(j)) => predicted == j,
            };
            AttributeVerdict {
                attribute: i,
                role,
                predicted,
                pass,
            }
        })
        .collect();
    let identity = identity.map(|(distance, threshold)| IdentityVerdict {
        distance,
        threshold,
        pass: distance <= threshold,
    });
    let feasible = attributes.iter().all(|a| a.pass) && identity.as_ref().is_none_or(|v| v.pass);
    Verdict {
        attributes,
        identity,
        feasible,
    }
}

/// Whether every suppressed head separates its target from the best rival by
/// at least the confidence margin.
pub fn suppression_margins_met(scores: &[Vec<f64>], labels: &[usize], spec: &AttackSpec) -> bool {
    if spec.confidence <= 0.0 {
        return true;
    }
    spec.suppress.iter().all(|(&i, &mode)| {
        let j = match mode {
            TargetMode::Class(j) => j,
            TargetMode::AnyOther => best_rival(&scores[i], labels[i]),
        };
        margin(&scores[i], j) >= spec.confidence
    })
}

fn scores_for(model: &dyn AttributeModel, image: &Tensor, space: ScoreSpace) -> Result<Vec<Vec<f64>>> {
    match space {
        ScoreSpace::Probability => model.probabilities(image),
        ScoreSpace::Logit => {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_parts(vec![image.len()], image.data().to_vec()));
            let heads = model.logits(&mut tape, x)?;
            Ok(heads.iter().map(|&h| tape.value(h).data().to_vec()).collect())
        }
    }
}

/// Evaluates the anonymization constraints on `T`.
pub fn check_constraints(
    model: &dyn AttributeModel,
    identity: Option<(IdentityAnchor<'_>, f64)>,
    anonymized: &Tensor,
    spec: &AttackSpec,
    labels: &[usize],
) -> Result<Verdict> {
    let scores = model.probabilities(anonymized)?;
    let identity = match identity {
        Some((anchor, threshold)) => {
            let e = anchor.model.embed(anonymized)?;
            Some((identity_distance(anchor.reference, &e)?, threshold))
        }
        None => None,
    };
    Ok(verdict_from_scores(&scores, labels, spec, identity))
}

/// Best feasible iterate seen so far, by squared-L2 distortion.
#[derive(Clone, Debug, Default)]
pub struct BestFeasible {
    pub image: Option<Tensor>,
    pub perturbation: Option<Tensor>,
    pub distortion: f64,
    pub iteration: usize,
}

impl BestFeasible {
    /// Whether a feasible iterate with this distortion would replace the best.
    pub fn improves(&self, distortion: f64) -> bool {
        self.image.is_none() || distortion < self.distortion
    }

    /// Offers a feasible iterate; only strictly smaller distortion replaces it.
    pub fn offer(&mut self, image: Tensor, perturbation: Tensor, distortion: f64, iteration: usize) -> bool {
        if !self.improves(distortion) {
            return false;
        }
        self.image = Some(image);
        self.perturbation = Some(perturbation);
        self.distortion = distortion;
        self.iteration = iteration;
        true
    }
}

/// Optimizer state of one attack run.
pub struct AttackState {
    pub w: Tensor,
    pub adam: AdamState,
    pub best: BestFeasible,
    pub iteration: usize,
}

/// Identity embedders available to an attack.
#[derive(Clone, Copy, Default)]
pub struct Embedders<'a> {
    pub white_box: Option<&'a dyn IdentityModel>,
    pub held_out: Option<&'a dyn IdentityModel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleTag {
    Suppress,
    Preserve,
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeOutcome {
    pub attribute: usize,
    pub name: String,
    pub role: RoleTag,
    pub true_class: usize,
    pub before_class: usize,
    pub before_score: f64,
    pub after_class: usize,
    pub after_score: f64,
    /// Class probabilities on `I`.
    pub before: Vec<f64>,
    /// Class probabilities on the reported `T`.
    pub after: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityOutcome {
    pub white_box_before: Option<f64>,
    pub white_box_after: Option<f64>,
    pub held_out_before: Option<f64>,
    pub held_out_after: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub subject: usize,
    pub success: bool,
    pub iterations: usize,
    /// Step after which the first feasible iterate appeared (0 = at init).
    pub first_feasible: Option<usize>,
    /// Step that produced the reported image.
    pub reported_iteration: usize,
    pub distortion: f64,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
    pub final_objective: f64,
    pub attributes: Vec<AttributeOutcome>,
    pub identity: IdentityOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub record: AttackRecord,
    /// Anonymized image at storage precision, strictly inside (0, 1).
    pub image: Tensor,
    pub perturbation: Tensor,
}

fn misclassified(
    model: &dyn AttributeModel,
    sample: &LabeledSample,
    spec: &AttackSpec,
    before: &[Vec<f64>],
) -> Vec<String> {
    spec.roles()
        .into_iter()
        .filter(|(i, _)| argmax(&before[*i]) != sample.labels[*i])
        .map(|(i, _)| model.schema().name(i).to_string())
        .collect()
}

fn embed_distance(model: Option<&dyn IdentityModel>, reference: Option<&Tensor>, image: &Tensor) -> Result<Option<f64>> {
    match (model, reference) {
        (Some(m), Some(r)) => Ok(Some(identity_distance(r, &m.embed(image)?)?)),
        _ => Ok(None),
    }
}

/// Runs the anonymization attack on one correctly classified sample.
pub fn run_attack(
    model: &dyn AttributeModel,
    embedders: Embedders<'_>,
    sample: &LabeledSample,
    spec: &AttackSpec,
) -> Result<AttackResult> {
    let schema = model.schema();
    spec.validate(schema)?;
    if sample.labels.len() != schema.len() {
        return Err(Error::shape("run_attack", &[schema.len()], &[sample.labels.len()]));
    }
    let image = &sample.image;
    let before = model.probabilities(image)?;
    let wrong = misclassified(model, sample, spec, &before);
    if !wrong.is_empty() {
        return Err(Error::Precondition(format!(
            "sample {} has misclassified attributes {wrong:?}",
            sample.id
        )));
    }
    for (&i, mode) in &spec.suppress {
        if *mode == TargetMode::Class(sample.labels[i]) {
            return Err(Error::Precondition(format!(
                "target class for {:?} equals the true class of sample {}",
                schema.name(i),
                sample.id
            )));
        }
    }
    let white_box = match (&spec.identity, embedders.white_box) {
        (Some(_), None) => {
            return Err(Error::Config(
                "identity preservation requested without a white-box embedder".into(),
            ))
        }
        (_, wb) => wb,
    };
    let white_ref = white_box.map(|m| m.embed(image)).transpose()?;
    let held_ref = embedders.held_out.map(|m| m.embed(image)).transpose()?;
    let anchor = match (&spec.identity, white_box, &white_ref) {
        (Some(_), Some(model), Some(reference)) => Some(IdentityAnchor { model, reference }),
        _ => None,
    };
    let threshold = spec.identity.map(|o| o.threshold);

    let objective = Objective {
        image,
        labels: &sample.labels,
        spec,
        model,
        identity: anchor,
    };
    let w0 = init_perturbation(image, spec.box_epsilon);
    let mut state = AttackState {
        adam: AdamState::new(image.dims(), AdamConfig::with_learning_rate(spec.learning_rate))?,
        w: w0.clone(),
        best: BestFeasible::default(),
        iteration: 0,
    };
    let mut first_feasible = None;

    // Screens an iterate with the unquantized scores, then re-verifies the
    // storage-precision image before it may become the reported one.
    let consider = |state: &mut AttackState, value: &ObjectiveValue, first: &mut Option<usize>| -> Result<()> {
        let id = value.identity_distance.zip(threshold);
        let screen = verdict_from_scores(&value.scores, &sample.labels, spec, id);
        if !screen.feasible
            || !suppression_margins_met(&value.scores, &sample.labels, spec)
            || !state.best.improves(value.distortion)
        {
            return Ok(());
        }
        let stored = reparameterize(image, &state.w)?.map(quantize_interior);
        let distortion = metrics::squared_l2(image, &stored)?;
        // Argmax agrees between logits and probabilities, so one forward pass
        // serves both the verdict and the margin check.
        let scores = scores_for(model, &stored, spec.score_space)?;
        let id = match (&anchor, threshold) {
            (Some(a), Some(tau)) => Some((identity_distance(a.reference, &a.model.embed(&stored)?)?, tau)),
            _ => None,
        };
        let verdict = verdict_from_scores(&scores, &sample.labels, spec, id);
        if verdict.feasible && suppression_margins_met(&scores, &sample.labels, spec) {
            first.get_or_insert(state.iteration);
            let w = state.w.clone();
            state.best.offer(stored, w, distortion, state.iteration);
        }
        Ok(())
    };

    let mut last_value = objective.evaluate(&state.w)?;
    let initial_objective = last_value.total;
    consider(&mut state, &last_value, &mut first_feasible)?;
    for _ in 0..spec.iterations {
        state.adam.step(&mut state.w, &last_value.gradient)?;
        state.iteration += 1;
        last_value = objective.evaluate(&state.w)?;
        consider(&mut state, &last_value, &mut first_feasible)?;
    }
    log::debug!(
        "sample {}: objective {initial_objective:.4} -> {:.4}, feasible at {first_feasible:?}",
        sample.id,
        last_value.total
    );

    let success = state.best.image.is_some();
    let (t, w, reported_iteration) = match state.best.image.take() {
        Some(t) => (t, state.best.perturbation.take().unwrap(), state.best.iteration),
        None => (
            reparameterize(image, &state.w)?.map(quantize_interior),
            state.w.clone(),
            state.iteration,
        ),
    };
    let w = w.map(|x| x as f32 as f64);

    let after = model.probabilities(&t)?;
    let attributes = (0..schema.len())
        .map(|i| {
            let role = match spec.role_of(i) {
                Some(Role::Preserve) => RoleTag::Preserve,
                Some(Role::Suppress(_)) => RoleTag::Suppress,
                None => RoleTag::Free,
            };
            let before_class = argmax(&before[i]);
            let after_class = argmax(&after[i]);
            AttributeOutcome {
                attribute: i,
                name: schema.name(i).to_string(),
                role,
                true_class: sample.labels[i],
                before_class,
                before_score: before[i][before_class],
                after_class,
                after_score: after[i][after_class],
                before: before[i].clone(),
                after: after[i].clone(),
            }
        })
        .collect();

    let t0 = reparameterize(image, &w0)?;
    let identity = IdentityOutcome {
        white_box_before: embed_distance(white_box, white_ref.as_ref(), &t0)?,
        white_box_after: embed_distance(white_box, white_ref.as_ref(), &t)?,
        held_out_before: embed_distance(embedders.held_out, held_ref.as_ref(), &t0)?,
        held_out_after: embed_distance(embedders.held_out, held_ref.as_ref(), &t)?,
        threshold,
    };

    let distortion = metrics::squared_l2(image, &t)?;
    let record = AttackRecord {
        sample_id: sample.id,
        subject: sample.subject,
        success,
        iterations: spec.iterations,
        first_feasible,
        reported_iteration,
        distortion,
        psnr: metrics::psnr(distortion / image.len() as f64),
        final_objective: last_value.total,
        attributes,
        identity,
    };
    Ok(AttackResult {
        record,
        image: t,
        perturbation: w,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRate {
    pub attribute: usize,
    pub name: String,
    pub role: RoleTag,
    /// Flip rate for suppressed attributes, retention rate for preserved ones.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub candidates: usize,
    pub eligible: usize,
    pub excluded_misclassified: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub suppression_flip_rate: Option<f64>,
    pub preservation_retention_rate: Option<f64>,
    pub per_attribute: Vec<AttributeRate>,
    /// Means over successful samples.
    pub mean_distortion: Option<f64>,
    #[serde(with = "opt_float")]
    pub mean_psnr: Option<f64>,
}

mod opt_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "crate::metrics::float_or_inf")] f64);

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        x.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub results: Vec<AttackResult>,
    pub summary: BatchSummary,
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

pub fn summarize(candidates: usize, results: &[AttackResult], schema: &AttributeSchema) -> BatchSummary {
    let n = results.len();
    let successes = results.iter().filter(|r| r.record.success).count();
    let ok: Vec<&AttackRecord> = results
        .iter()
        .filter(|r| r.record.success)
        .map(|r| &r.record)
        .collect();
    let mean = |f: fn(&AttackRecord) -> f64| {
        (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
    };

    let (mut flips, mut suppressed, mut kept, mut preserved) = (0, 0, 0, 0);
    let mut per_attribute = Vec::new();
    if let Some(first) = results.first() {
        for outcome in &first.record.attributes {
            let i = outcome.attribute;
            let (mut hits, mut total) = (0, 0);
            for r in results {
                let a = &r.record.attributes[i];
                match a.role {
                    RoleTag::Suppress => {
                        total += 1;
                        hits += usize::from(a.after_class != a.true_class);
                    }
                    RoleTag::Preserve => {
                        total += 1;
                        hits += usize::from(a.after_class == a.true_class);
                    }
                    RoleTag::Free => {}
                }
            }
            match outcome.role {
                RoleTag::Suppress => {
                    flips += hits;
                    suppressed += total;
                }
                RoleTag::Preserve => {
                    kept += hits;
                    preserved += total;
                }
                RoleTag::Free => continue,
            }
            per_attribute.push(AttributeRate {
                attribute: i,
                name: schema.name(i).to_string(),
                role: outcome.role,
                rate: hits as f64 / total.max(1) as f64,
            });
        }
    }

    BatchSummary {
        candidates,
        eligible: n,
        excluded_misclassified: candidates - n,
        successes,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        suppression_flip_rate: rate(flips, suppressed),
        preservation_retention_rate: rate(kept, preserved),
        per_attribute,
        mean_distortion: mean(|r| r.distortion),
        mean_psnr: mean(|r| r.psnr),
    }
}

/// Attacks every sample whose constrained attributes the model classifies
/// correctly. Runs on the current rayon pool; results keep input order.
pub fn batch_attack(
    samples: &[&LabeledSample],
    spec: &AttackSpec,
    model: &dyn AttributeModel,
    embedders: Embedders<'_>,
) -> Result<BatchOutcome> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to attack".into()));
    }
    spec.validate(model.schema())?;
    let roles = spec.roles();
    let eligible: Vec<&LabeledSample> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.image)?;
            Ok(roles
                .iter()
                .all(|(i, _)| pred[*i] == s.labels[*i])
                .then_some(*s))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if eligible.is_empty() {
        return Err(Error::Precondition(
            "no eligible samples: every candidate is misclassified on a constrained attribute".into(),
        ));
    }
    log::info!(
        "attacking {} of {} samples ({} misclassified)",
        eligible.len(),
        samples.len(),
        samples.len() - eligible.len()
    );
    let results = eligible
        .par_iter()
        .map(|s| run_attack(model, embedders, s, spec))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(samples.len(), &results, model.schema());
    Ok(BatchOutcome { results, summary })
}

#[derive(Serialize, Deserialize)]
struct ResultsFile {
    spec: AttackSpec,
    summary: BatchSummary,
    samples: Vec<AttackRecord>,
}

pub fn anonymized_file(sample_id: usize) -> String {
    format!("anonymized/{sample_id:06}.ten")
}

pub fn perturbation_file(sample_id: usize) -> String {
    format!("perturbation/{sample_id:06}.ten")
}

impl BatchOutcome {
    pub fn save(&self, dir: &Path, spec: &AttackSpec) -> Result<()> {
        for r in &self.results {
            tenfile::write(&dir.join(anonymized_file(r.record.sample_id)), &r.image)?;
            tenfile::write(&dir.join(perturbation_file(r.record.sample_id)), &r.perturbation)?;
        }
        let file = ResultsFile {
            spec: spec.clone(),
            summary: self.summary.clone(),
            samples: self.results.iter().map(|r| r.record.clone()).collect(),
        };
        crate::write_json(&dir.join("results.json"), &file)
    }

    pub fn load(dir: &Path) -> Result<(Self, AttackSpec)> {
        let file: ResultsFile = crate::read_json(&dir.join("results.json"))?;
        let results = file
            .samples
            .into_iter()
            .map(|record| {
                let image = tenfile::read(&dir.join(anonymized_file(record.sample_id)))?;
                let perturbation = tenfile::read(&dir.join(perturbation_file(record.sample_id)))?;
                Ok(AttackResult {
                    record,
                    image,
                    perturbation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            BatchOutcome {
                results,
                summary: file.summary,
            },
            file.spec,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any_other(i: usize) -> AttackSpec {
        AttackSpec {
            suppress: BTreeMap::from([(i, TargetMode::AnyOther)]),
            ..AttackSpec::default()
        }
    }

    #[test]
    fn init_examples() {
        let img = Tensor::vector(vec![0.5, 0.0, 1.0, 0.3]);
        let w0 = init_perturbation(&img, 1e-6);
        assert_eq!(w0.data()[0], -0.5);
        let t = reparameterize(&img, &w0).unwrap();
        assert_eq!(t.data()[0], 0.5);
        assert!((t.data()[1] - 1e-6).abs() < 1e-15);
        assert!((t.data()[2] - (1.0 - 1e-6)).abs() < 1e-12);
        for (a, b) in t.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6 + 1e-15);
        }
    }

    #[test]
    fn reparameterize_range() {
        let img = Tensor::vector(vec![0.0, 0.0, 0.3]);
        let w = Tensor::vector(vec![0.0, 50.0, -0.3]);
        let t = reparameterize(&img, &w).unwrap();
        assert_eq!(t.data()[0], 0.5);
        assert!(t.data()[1] <= 1.0);
        assert_eq!(t.data()[2], 0.5);
    }

    #[test]
    fn quantize_interior_stays_inside() {
        assert!(quantize_interior(1.0 - 1e-12) < 1.0);
        assert!(quantize_interior(1e-50) > 0.0);
        assert_eq!(quantize_interior(0.5), 0.5);
    }

    #[test]
    fn objective_examples() {
        let sup = Role::Suppress(TargetMode::AnyOther);
        assert!((attribute_objective(&[0.9, 0.1], 0, sup, 0.0).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(attribute_objective(&[0.2, 0.8], 0, sup, 0.1).unwrap(), -0.1);
        assert_eq!(attribute_objective(&[0.3, 0.3, 0.4], 2, Role::Preserve, 0.0).unwrap(), 0.0);
        // A tie with the best rival sits exactly on the decision boundary.
        assert_eq!(attribute_objective(&[0.4, 0.2, 0.4], 2, Role::Preserve, 0.1).unwrap(), 0.0);
        assert!(attribute_objective(&[0.5, 0.5], 2, Role::Preserve, 0.0).is_err());
        let fixed = Role::Suppress(TargetMode::Class(1));
        assert!((attribute_objective(&[0.5, 0.2, 0.3], 0, fixed, 0.0).unwrap() - 0.3).abs() < 1e-15);
        assert!(attribute_objective(&[0.5, 0.5], 0, Role::Suppress(TargetMode::Class(5)), 0.0).is_err());
    }

    #[test]
    fn dynamic_target_is_best_rival() {
        let sup = Role::Suppress(TargetMode::AnyOther);
        assert_eq!(target_class(&[0.6, 0.1, 0.3], 0, sup).unwrap(), 2);
        assert_eq!(target_class(&[0.1, 0.6, 0.3], 1, sup).unwrap(), 2);
        assert_eq!(best_rival(&[0.5, 0.25, 0.25], 0), 1);
    }

    #[test]
    fn spec_validation() {
        let schema = AttributeSchema::five_binary();
        let mut spec = any_other(0);
        spec.preserve.insert(0);
        assert!(spec.validate(&schema).unwrap_err().to_string().contains("both"));
        assert!(any_other(9).validate(&schema).is_err());
        let spec = AttackSpec {
            suppress: BTreeMap::from([(0, TargetMode::Class(2))]),
            ..AttackSpec::default()
        };
        assert!(spec.validate(&schema).is_err());
        let spec = AttackSpec {
            confidence: 1.5,
            ..any_other(0)
        };
        assert!(spec.validate(&schema).is_err());
        assert!(any_other(0).validate(&schema).is_ok());
    }

    #[test]
    fn verdicts_from_probability_tables() {
        let mut spec = any_other(0);
        spec.preserve.insert(1);
        let labels = [0, 1];
        let flipped = vec![vec![0.3, 0.7], vec![0.2, 0.8]];
        assert!(verdict_from_scores(&flipped, &labels, &spec, None).feasible);
        let untouched = vec![vec![0.7, 0.3], vec![0.2, 0.8]];
        assert!(!verdict_from_scores(&untouched, &labels, &spec, None).feasible);
        let broken = vec![vec![0.3, 0.7], vec![0.8, 0.2]];
        assert!(!verdict_from_scores(&broken, &labels, &spec, None).feasible);

        let v = verdict_from_scores(&flipped, &labels, &spec, Some((0.25, 0.25)));
        assert!(v.feasible, "distance equal to the threshold passes");
        let v = verdict_from_scores(&flipped, &labels, &spec, Some((0.2500001, 0.25)));
        assert!(!v.feasible);
    }

    #[test]
    fn margin_screen() {
        let spec = AttackSpec {
            confidence: 0.1,
            ..any_other(0)
        };
        assert!(suppression_margins_met(&[vec![0.4, 0.6]], &[0], &spec));
        assert!(!suppression_margins_met(&[vec![0.46, 0.54]], &[0], &spec));
        assert!(suppression_margins_met(&[vec![0.46, 0.54]], &[0], &any_other(0)));
    }

    #[test]
    fn best_so_far_needs_strict_improvement() {
        let mut best = BestFeasible::default();
        let t = Tensor::scalar(0.5);
        assert!(best.offer(t.clone(), t.clone(), 2.0, 1));
        assert!(!best.offer(t.clone(), t.clone(), 2.0, 2));
        assert!(!best.offer(t.clone(), t.clone(), 3.0, 3));
        assert!(best.offer(t.clone(), t.clone(), 1.0, 4));
        assert_eq!(best.iteration, 4);
        assert_eq!(best.distortion, 1.0);
    }
}
