//! Tabular softmax policy.
//!
//! A policy is a table of logits indexed by `(context, response)`. Each
//! context is a prompt; each response is a single categorical draw. Pass
//! rates, their gradients and the score function are all available in closed
//! form, which makes the policy a ground-truth substrate for checking
//! estimator identities by enumeration.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpeedError};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Logit table, row-major by context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    contexts: usize,
    responses: usize,
    logits: Vec<f64>,
}

impl PolicyParams {
    /// All-zero logits (uniform policy in every context).
    pub fn zeros(contexts: usize, responses: usize) -> Result<Self> {
        Self::from_flat(contexts, responses, vec![0.0; contexts * responses])
    }

    pub fn from_flat(contexts: usize, responses: usize, logits: Vec<f64>) -> Result<Self> {
        if contexts < 1 {
            return Err(invalid("policy needs at least one context"));
        }
        if responses < 2 {
            return Err(invalid("policy needs at least two responses per context"));
        }
        if logits.len() != contexts * responses {
            return Err(SpeedError::DimensionMismatch {
                expected: contexts * responses,
                found: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logits must be finite"));
        }
        Ok(Self {
            contexts,
            responses,
            logits,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let responses = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != responses) {
            return Err(invalid("logit rows must have equal length"));
        }
        Self::from_flat(rows.len(), responses, rows.concat())
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, context: usize) -> Result<&[f64]> {
        self.check_context(context)?;
        let start = context * self.responses;
        Ok(&self.logits[start..start + self.responses])
    }

    /// Flat index of `(context, response)`.
    pub fn flat_index(&self, context: usize, response: usize) -> usize {
        context * self.responses + response
    }

    pub fn set_row(&mut self, context: usize, row: &[f64]) -> Result<()> {
        self.check_context(context)?;
        if row.len() != self.responses {
            return Err(SpeedError::DimensionMismatch {
                expected: self.responses,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logits must be finite"));
        }
        let start = context * self.responses;
        self.logits[start..start + self.responses].copy_from_slice(row);
        Ok(())
    }

    /// `θ ← θ + scale · direction`.
    pub fn ascend(&mut self, direction: &GradientVector, scale: f64) -> Result<()> {
        if direction.len() != self.logits.len() {
            return Err(SpeedError::DimensionMismatch {
                expected: self.logits.len(),
                found: direction.len(),
            });
        }
        for (theta, g) in self.logits.iter_mut().zip(direction.as_slice()) {
            *theta += scale * g;
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(invalid("update produced non-finite logits"));
        }
        Ok(())
    }

    /// Perturb a single flat coordinate. Used by finite-difference checks.
    pub fn perturbed(&self, flat: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.logits[flat] += delta;
        out
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if context >= self.contexts {
            return Err(SpeedError::OutOfRange {
                what: "context",
                index: context,
                limit: self.contexts,
            });
        }
        Ok(())
    }

    fn check_response(&self, response: usize) -> Result<()> {
        if response >= self.responses {
            return Err(SpeedError::OutOfRange {
                what: "response",
                index: response,
                limit: self.responses,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Reward is membership of the sampled response in `correct` (sorted, unique).
    PolicyBacked { context: usize, correct: Vec<usize> },
    /// Reward is a Bernoulli draw with a fixed success probability.
    Latent { pass_rate: f64 },
}

/// A prompt together with its verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: TaskId,
    pub kind: TaskKind,
}

impl TaskInstance {
    pub fn policy_backed(id: u64, context: usize, correct: impl IntoIterator<Item = usize>) -> Self {
        let mut correct: Vec<usize> = correct.into_iter().collect();
        correct.sort_unstable();
        correct.dedup();
        Self {
            id: TaskId(id),
            kind: TaskKind::PolicyBacked { context, correct },
        }
    }

    pub fn latent(id: u64, pass_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pass_rate) {
            return Err(invalid(format!("latent pass rate {pass_rate} outside [0, 1]")));
        }
        Ok(Self {
            id: TaskId(id),
            kind: TaskKind::Latent { pass_rate },
        })
    }

    pub fn is_latent(&self) -> bool {
        matches!(self.kind, TaskKind::Latent { .. })
    }

    /// Checks the task against a policy's shape.
    pub fn validate(&self, params: &PolicyParams) -> Result<()> {
        match &self.kind {
            TaskKind::PolicyBacked { context, correct } => {
                params.check_context(*context)?;
                correct.iter().try_for_each(|&y| params.check_response(y))
            }
            TaskKind::Latent { pass_rate } if (0.0..=1.0).contains(pass_rate) => Ok(()),
            TaskKind::Latent { pass_rate } => Err(invalid(format!("latent pass rate {pass_rate} outside [0, 1]"))),
        }
    }

    fn backing(&self) -> Result<(usize, &[usize])> {
        match &self.kind {
            TaskKind::PolicyBacked { context, correct } => Ok((*context, correct.as_slice())),
            TaskKind::Latent { .. } => Err(SpeedError::LatentTask(self.id)),
        }
    }
}

/// Dense gradient over the flattened logit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// One sampled response and its verifier outcome. `response` is `None` for
/// latent tasks, which have no response space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub response: Option<usize>,
    pub reward: bool,
}

/// Policy probabilities for one context, frozen at generation time.
///
/// Samples keep a handle to the distribution they were drawn from so the
/// score function can be evaluated later without recomputing log-probs under
/// newer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSnapshot {
    pub context: usize,
    pub probs: Arc<[f64]>,
}

impl ScoreSnapshot {
    pub fn capture(params: &PolicyParams, context: usize) -> Result<Self> {
        Ok(Self {
            context,
            probs: policy_probs(params, context)?.into(),
        })
    }

    /// `∇ log π(response | context)` restricted to the context row.
    pub fn score_row(&self, response: usize) -> Vec<f64> {
        score_row(&self.probs, response)
    }
}

/// Numerically stable softmax of a logit row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `π_θ(· | context)`.
pub fn policy_probs(params: &PolicyParams, context: usize) -> Result<Vec<f64>> {
    Ok(softmax(params.row(context)?))
}

/// `e_response − π` over one row. The diagonal term is computed as the mass
/// of the other responses, which keeps it accurate when `π(response) → 1`.
pub fn score_row(probs: &[f64], response: usize) -> Vec<f64> {
    let mut row: Vec<f64> = probs.iter().map(|p| -p).collect();
    row[response] = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != response)
        .map(|(_, p)| p)
        .sum();
    row
}

/// Probabilities for the task's context plus the pass and fail masses, each
/// summed over its own class.
pub(crate) fn class_masses(params: &PolicyParams, task: &TaskInstance) -> Result<ClassMasses> {
    task.validate(params)?;
    let (context, correct) = task.backing()?;
    let probs = policy_probs(params, context)?;
    let mut is_correct = vec![false; params.responses()];
    for &y in correct {
        is_correct[y] = true;
    }
    let pass = probs.iter().zip(&is_correct).filter(|(_, &c)| c).map(|(p, _)| p).sum();
    let fail = probs.iter().zip(&is_correct).filter(|(_, &c)| !c).map(|(p, _)| p).sum();
    Ok(ClassMasses {
        context,
        probs,
        is_correct,
        pass,
        fail,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct ClassMasses {
    pub context: usize,
    pub probs: Vec<f64>,
    pub is_correct: Vec<bool>,
    pub pass: f64,
    pub fail: f64,
}

/// `P_x(θ) = Σ_{y ∈ C} π_θ(y | x)`.
pub fn pass_rate_exact(params: &PolicyParams, task: &TaskInstance) -> Result<f64> {
    Ok(class_masses(params, task)?.pass)
}

/// `∇_θ P_x(θ)`: nonzero only on the task's context row, where entry `y` is
/// `π(y)(1[y ∈ C] − P)`.
pub fn pass_rate_grad_exact(params: &PolicyParams, task: &TaskInstance) -> Result<GradientVector> {
    let masses = class_masses(params, task)?;
    let mut grad = GradientVector::zeros(params.param_count());
    let base = params.flat_index(masses.context, 0);
    for (y, (&p, &correct)) in masses.probs.iter().zip(&masses.is_correct).enumerate() {
        // 1 − P is the fail mass; −P is minus the pass mass.
        let centered = if correct { masses.fail } else { -masses.pass };
        grad.values[base + y] = p * centered;
    }
    Ok(grad)
}

/// `∇_θ log π_θ(response | context)`.
pub fn logprob_grad(params: &PolicyParams, context: usize, response: usize) -> Result<GradientVector> {
    let probs = policy_probs(params, context)?;
    params.check_response(response)?;
    let mut grad = GradientVector::zeros(params.param_count());
    let base = params.flat_index(context, 0);
    grad.values[base..base + params.responses()].copy_from_slice(&score_row(&probs, response));
    Ok(grad)
}

/// Draw index from a categorical distribution by inverse CDF.
pub(crate) fn draw_categorical(probs: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` marginally below 1; fall back to the last response
    // with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draw `n` i.i.d. responses for `task`.
///
/// Policy-backed tasks sample categorically from the context row; latent
/// tasks draw Bernoulli rewards with no response id.
pub fn sample_responses(
    params: Option<&PolicyParams>,
    task: &TaskInstance,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    match &task.kind {
        TaskKind::Latent { pass_rate } => {
            if !(0.0..=1.0).contains(pass_rate) {
                return Err(invalid(format!("latent pass rate {pass_rate} outside [0, 1]")));
            }
            Ok((0..n)
                .map(|_| Sample {
                    response: None,
                    reward: rng.uniform() < *pass_rate,
                })
                .collect())
        }
        TaskKind::PolicyBacked { context, correct } => {
            let params = params.ok_or_else(|| invalid("policy-backed task needs parameters"))?;
            task.validate(params)?;
            let probs = policy_probs(params, *context)?;
            Ok((0..n)
                .map(|_| {
                    let y = draw_categorical(&probs, rng);
                    Sample {
                        response: Some(y),
                        reward: correct.binary_search(&y).is_ok(),
                    }
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_probs_for_zero_logits() {
        let p = PolicyParams::zeros(1, 4).unwrap();
        let probs = policy_probs(&p, 0).unwrap();
        assert!(probs.iter().all(|&v| close(v, 0.25, 1e-15)));
    }

    #[test]
    fn two_response_softmax_by_hand() {
        let p = PolicyParams::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap();
        let probs = policy_probs(&p, 0).unwrap();
        assert!(close(probs[0], 0.75, 1e-12));
        assert!(close(probs[1], 0.25, 1e-12));
    }

    #[test]
    fn equal_logits_are_uniform() {
        let p = PolicyParams::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        let probs = policy_probs(&p, 0).unwrap();
        assert!(probs.iter().all(|&v| close(v, 1.0 / 3.0, 1e-12)));
    }

    #[test]
    fn context_out_of_range() {
        let p = PolicyParams::zeros(2, 3).unwrap();
        assert!(matches!(
            policy_probs(&p, 2),
            Err(SpeedError::OutOfRange { what: "context", .. })
        ));
        assert!(logprob_grad(&p, 0, 3).is_err());
    }

    #[test]
    fn shape_invariants() {
        assert!(PolicyParams::zeros(0, 3).is_err());
        assert!(PolicyParams::zeros(1, 1).is_err());
        assert!(PolicyParams::from_flat(1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn pass_rate_edge_sets() {
        let p = PolicyParams::zeros(1, 4).unwrap();
        let empty = TaskInstance::policy_backed(0, 0, []);
        let all = TaskInstance::policy_backed(1, 0, 0..4);
        let half = TaskInstance::policy_backed(2, 0, [0, 1]);
        assert_eq!(pass_rate_exact(&p, &empty).unwrap(), 0.0);
        assert!(close(pass_rate_exact(&p, &all).unwrap(), 1.0, 1e-15));
        assert!(close(pass_rate_exact(&p, &half).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn latent_task_has_no_policy_pass_rate() {
        let p = PolicyParams::zeros(1, 2).unwrap();
        let t = TaskInstance::latent(9, 0.3).unwrap();
        assert_eq!(pass_rate_exact(&p, &t), Err(SpeedError::LatentTask(TaskId(9))));
        assert!(pass_rate_grad_exact(&p, &t).is_err());
    }

    #[test]
    fn correct_set_must_fit_response_space() {
        let p = PolicyParams::zeros(1, 2).unwrap();
        let t = TaskInstance::policy_backed(0, 0, [2]);
        assert!(pass_rate_exact(&p, &t).is_err());
    }

    #[test]
    fn degenerate_pass_rates_have_exactly_zero_gradient() {
        let p = PolicyParams::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let empty = TaskInstance::policy_backed(0, 0, []);
        let all = TaskInstance::policy_backed(1, 0, 0..3);
        assert!(pass_rate_grad_exact(&p, &empty).unwrap().is_zero());
        assert!(pass_rate_grad_exact(&p, &all).unwrap().is_zero());
    }

    #[test]
    fn pass_rate_gradient_by_hand() {
        let p = PolicyParams::zeros(1, 2).unwrap();
        let t = TaskInstance::policy_backed(0, 0, [0]);
        let g = pass_rate_grad_exact(&p, &t).unwrap();
        assert!(close(g.as_slice()[0], 0.25, 1e-15));
        assert!(close(g.as_slice()[1], -0.25, 1e-15));
    }

    #[test]
    fn gradient_lives_on_task_row_only() {
        let p = PolicyParams::from_rows(&[vec![0.1, 0.2], vec![1.0, -1.0], vec![0.0, 0.5]]).unwrap();
        let t = TaskInstance::policy_backed(0, 1, [1]);
        let g = pass_rate_grad_exact(&p, &t).unwrap();
        for (i, v) in g.as_slice().iter().enumerate() {
            if !(2..4).contains(&i) {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn logprob_grad_by_hand() {
        let p = PolicyParams::zeros(1, 2).unwrap();
        let g = logprob_grad(&p, 0, 0).unwrap();
        assert_eq!(g.as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn score_row_stays_accurate_near_certainty() {
        let probs = softmax(&[40.0, 0.0, 0.0]);
        let row = score_row(&probs, 0);
        // 1 − π(0) = 2e^{-40}/(1+2e^{-40}) would round to 0 if computed directly.
        assert!(row[0] > 0.0);
        assert!(close(row[0] / (2.0 * (-40f64).exp()), 1.0, 1e-12));
    }

    #[test]
    fn latent_degenerate_bernoulli() {
        let mut rng = RngStream::new(11);
        let zero = TaskInstance::latent(0, 0.0).unwrap();
        let one = TaskInstance::latent(1, 1.0).unwrap();
        let s0 = sample_responses(None, &zero, 50, &mut rng).unwrap();
        let s1 = sample_responses(None, &one, 50, &mut rng).unwrap();
        assert!(s0.iter().all(|s| !s.reward && s.response.is_none()));
        assert!(s1.iter().all(|s| s.reward));
    }

    #[test]
    fn sampling_rejects_zero_count() {
        let mut rng = RngStream::new(1);
        let t = TaskInstance::latent(0, 0.5).unwrap();
        assert!(sample_responses(None, &t, 0, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let p = PolicyParams::from_rows(&[vec![0.4, -0.3, 1.1, 0.0]]).unwrap();
        let t = TaskInstance::policy_backed(0, 0, [1, 2]);
        let a = sample_responses(Some(&p), &t, 200, &mut RngStream::new(99)).unwrap();
        let b = sample_responses(Some(&p), &t, 200, &mut RngStream::new(99)).unwrap();
        assert_eq!(a, b);
    }
}
