//! Simulated inference engines and the rollout clock.
//!
//! An engine serves one [`InferenceRequest`] per call and charges simulated
//! time from a [`LatencyModel`]: a fixed per-call overhead plus a cost per
//! wave of `concurrency_width` generations. Two engines are provided: one
//! samples from a tabular policy, the other draws Bernoulli rewards from
//! fixed latent pass rates.

use std::collections::HashMap;

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpeedError};
use crate::metrics::{IterationKind, MetricsRecord};
use crate::policy::{
    pass_rate_exact, sample_responses, PolicyParams, Sample, ScoreSnapshot, TaskId, TaskInstance, TaskKind,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Screening,
    Continuation,
    /// A whole group generated in one go (no screening).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestItem {
    pub task: TaskId,
    pub phase: Phase,
    pub n_generations: usize,
}

/// Everything one engine call must generate, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub items: Vec<RequestItem>,
}

impl InferenceRequest {
    pub fn total_generations(&self) -> usize {
        self.items.iter().map(|i| i.n_generations).sum()
    }
}

/// A generated response, with the policy snapshot it was drawn from when the
/// task is policy-backed.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub sample: Sample,
    pub score: Option<ScoreSnapshot>,
}

impl Generation {
    pub fn reward(&self) -> bool {
        self.sample.reward
    }

    /// Score-function row for this response, if it has one.
    pub fn score_row(&self) -> Option<(usize, Vec<f64>)> {
        let snap = self.score.as_ref()?;
        let y = self.sample.response?;
        Some((snap.context, snap.score_row(y)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutput {
    /// `responses[i]` belongs to `request.items[i]`.
    pub responses: Vec<Vec<Generation>>,
    pub elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    /// Seconds charged per engine call.
    pub call_overhead: f64,
    /// Seconds per wave of `concurrency_width` generations.
    pub per_generation_cost: f64,
    pub concurrency_width: usize,
    /// Seconds charged per training update.
    pub update_cost: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            call_overhead: 1.0,
            per_generation_cost: 0.5,
            concurrency_width: 64,
            update_cost: 2.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let costs = [self.call_overhead, self.per_generation_cost, self.update_cost];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid("latency costs must be finite and nonnegative"));
        }
        if self.concurrency_width < 1 {
            return Err(invalid("concurrency width must be at least 1"));
        }
        Ok(())
    }

    /// `overhead + cost · ⌈generations / width⌉`.
    pub fn call_time(&self, generations: usize) -> f64 {
        let waves = generations.div_ceil(self.concurrency_width);
        self.call_overhead + self.per_generation_cost * waves as f64
    }
}

pub trait InferenceEngine {
    /// Serve one request. Responses come back in request order.
    fn generate(&mut self, request: &InferenceRequest, rng: &mut RngStream) -> Result<EngineOutput>;

    fn latency(&self) -> &LatencyModel;

    /// Mean pass rate over every task the engine knows.
    fn population_pass_rate(&self) -> f64;

    /// Live policy, when the engine samples from one.
    fn policy_mut(&mut self) -> Option<&mut PolicyParams>;

    fn policy(&self) -> Option<&PolicyParams>;

    fn task_ids(&self) -> Vec<TaskId>;
}

#[derive(Debug, Clone)]
struct TaskTable {
    tasks: Vec<TaskInstance>,
    index: HashMap<TaskId, usize>,
}

impl TaskTable {
    fn new(tasks: Vec<TaskInstance>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.id, i).is_some() {
                return Err(invalid(format!("duplicate task id {}", t.id)));
            }
        }
        Ok(Self { tasks, index })
    }

    fn get(&self, id: TaskId) -> Result<&TaskInstance> {
        self.index
            .get(&id)
            .map(|&i| &self.tasks[i])
            .ok_or(SpeedError::UnknownTask(id))
    }

    fn ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }
}

/// Samples responses from a tabular softmax policy.
#[derive(Debug, Clone)]
pub struct PolicyEngine {
    params: PolicyParams,
    table: TaskTable,
    latency: LatencyModel,
}

impl PolicyEngine {
    pub fn new(params: PolicyParams, tasks: Vec<TaskInstance>, latency: LatencyModel) -> Result<Self> {
        latency.validate()?;
        for t in &tasks {
            if t.is_latent() {
                return Err(invalid(format!(
                    "task {} is latent; policy engine needs policy-backed tasks",
                    t.id
                )));
            }
            t.validate(&params)?;
        }
        Ok(Self {
            params,
            table: TaskTable::new(tasks)?,
            latency,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn tasks(&self) -> &[TaskInstance] {
        &self.table.tasks
    }
}

impl InferenceEngine for PolicyEngine {
    fn generate(&mut self, request: &InferenceRequest, rng: &mut RngStream) -> Result<EngineOutput> {
        let mut responses = Vec::with_capacity(request.items.len());
        for item in &request.items {
            let task = self.table.get(item.task)?;
            let TaskKind::PolicyBacked { context, .. } = &task.kind else {
                unreachable!("policy engine holds only policy-backed tasks")
            };
            let snapshot = ScoreSnapshot::capture(&self.params, *context)?;
            let mut item_rng = rng.split();
            let samples = if item.n_generations == 0 {
                Vec::new()
            } else {
                sample_responses(Some(&self.params), task, item.n_generations, &mut item_rng)?
            };
            responses.push(
                samples
                    .into_iter()
                    .map(|sample| Generation {
                        sample,
                        score: Some(snapshot.clone()),
                    })
                    .collect(),
            );
        }
        Ok(EngineOutput {
            responses,
            elapsed: self.latency.call_time(request.total_generations()),
        })
    }

    fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    fn population_pass_rate(&self) -> f64 {
        let tasks = &self.table.tasks;
        if tasks.is_empty() {
            return 0.0;
        }
        let total: f64 = tasks
            .iter()
            .map(|t| pass_rate_exact(&self.params, t).expect("validated at construction"))
            .sum();
        total / tasks.len() as f64
    }

    fn policy_mut(&mut self) -> Option<&mut PolicyParams> {
        Some(&mut self.params)
    }

    fn policy(&self) -> Option<&PolicyParams> {
        Some(&self.params)
    }

    fn task_ids(&self) -> Vec<TaskId> {
        self.table.ids()
    }
}

/// Draws Bernoulli rewards from fixed per-task pass rates.
#[derive(Debug, Clone)]
pub struct LatentEngine {
    table: TaskTable,
    latency: LatencyModel,
}

impl LatentEngine {
    pub fn new(tasks: Vec<TaskInstance>, latency: LatencyModel) -> Result<Self> {
        latency.validate()?;
        if let Some(t) = tasks.iter().find(|t| !t.is_latent()) {
            return Err(invalid(format!(
                "task {} is policy-backed; latent engine needs latent tasks",
                t.id
            )));
        }
        Ok(Self {
            table: TaskTable::new(tasks)?,
            latency,
        })
    }
}

impl InferenceEngine for LatentEngine {
    fn generate(&mut self, request: &InferenceRequest, rng: &mut RngStream) -> Result<EngineOutput> {
        let mut responses = Vec::with_capacity(request.items.len());
        for item in &request.items {
            let task = self.table.get(item.task)?;
            let mut item_rng = rng.split();
            let samples = if item.n_generations == 0 {
                Vec::new()
            } else {
                sample_responses(None, task, item.n_generations, &mut item_rng)?
            };
            responses.push(
                samples
                    .into_iter()
                    .map(|sample| Generation { sample, score: None })
                    .collect(),
            );
        }
        Ok(EngineOutput {
            responses,
            elapsed: self.latency.call_time(request.total_generations()),
        })
    }

    fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    fn population_pass_rate(&self) -> f64 {
        let tasks = &self.table.tasks;
        if tasks.is_empty() {
            return 0.0;
        }
        let total: f64 = tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Latent { pass_rate } => pass_rate,
                TaskKind::PolicyBacked { .. } => unreachable!("checked at construction"),
            })
            .sum();
        total / tasks.len() as f64
    }

    fn policy_mut(&mut self) -> Option<&mut PolicyParams> {
        None
    }

    fn policy(&self) -> Option<&PolicyParams> {
        None
    }

    fn task_ids(&self) -> Vec<TaskId> {
        self.table.ids()
    }
}

/// Shape of a synthetic prompt population: point masses at pass rate 0 and
/// 1 and a Beta body in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub size: usize,
    pub zero_mass: f64,
    pub one_mass: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Distance of the point masses from the edges: the "zero" tasks get pass
    /// rate `extreme_gap` and the "one" tasks `1 − extreme_gap`. Zero means
    /// the masses sit exactly at 0 and 1.
    #[serde(default)]
    pub extreme_gap: f64,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.zero_mass) || !in_unit(self.one_mass) || self.zero_mass + self.one_mass > 1.0 {
            return Err(invalid("population masses must lie in [0, 1] and sum to at most 1"));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(invalid("Beta parameters must be positive and finite"));
        }
        if !(0.0..0.5).contains(&self.extreme_gap) {
            return Err(invalid("extreme_gap must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Draw `size` pass rates.
    pub fn draw_pass_rates(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.validate()?;
        let body = Beta::new(self.alpha, self.beta).map_err(|e| invalid(e.to_string()))?;
        Ok((0..self.size)
            .map(|_| {
                let u = rng.uniform();
                if u < self.zero_mass {
                    self.extreme_gap
                } else if u < self.zero_mass + self.one_mass {
                    1.0 - self.extreme_gap
                } else {
                    body.sample(rng)
                }
            })
            .collect())
    }
}

/// Latent population, ids `0..size`.
pub fn make_population(spec: &PopulationSpec, rng: &mut RngStream) -> Result<Vec<TaskInstance>> {
    spec.draw_pass_rates(rng)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| TaskInstance::latent(i as u64, p))
        .collect()
}

/// Policy-backed population with one context per task.
///
/// Each context has a single correct response (id 0) whose logit is set so
/// the initial pass rate equals the drawn one; other logits are zero. Pass
/// rate exactly 0 or 1 is realized with an empty or full correct set.
pub fn make_policy_population(
    spec: &PopulationSpec,
    responses: usize,
    rng: &mut RngStream,
) -> Result<(PolicyParams, Vec<TaskInstance>)> {
    if responses < 2 {
        return Err(invalid("policy population needs at least two responses"));
    }
    let rates = spec.draw_pass_rates(rng)?;
    let mut params = PolicyParams::zeros(rates.len().max(1), responses)?;
    let mut tasks = Vec::with_capacity(rates.len());
    for (ctx, &p) in rates.iter().enumerate() {
        let id = ctx as u64;
        let task = if p <= 0.0 {
            TaskInstance::policy_backed(id, ctx, [])
        } else if p >= 1.0 {
            TaskInstance::policy_backed(id, ctx, 0..responses)
        } else {
            let mut row = vec![0.0; responses];
            row[0] = (p * (responses - 1) as f64 / (1.0 - p)).ln();
            params.set_row(ctx, &row)?;
            TaskInstance::policy_backed(id, ctx, [0])
        };
        tasks.push(task);
    }
    Ok((params, tasks))
}

/// Simulated time split by activity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockReport {
    pub inference_seconds: f64,
    pub training_seconds: f64,
    pub total_seconds: f64,
    pub updates: u64,
    pub engine_calls: u64,
}

pub fn clock_report(trace: &[MetricsRecord]) -> ClockReport {
    let mut report = ClockReport {
        inference_seconds: 0.0,
        training_seconds: 0.0,
        total_seconds: 0.0,
        updates: 0,
        engine_calls: 0,
    };
    for r in trace {
        match r.kind {
            IterationKind::Inference => {
                report.inference_seconds += r.sim_elapsed_s;
                report.engine_calls += 1;
            }
            IterationKind::Update => {
                report.training_seconds += r.sim_elapsed_s;
                report.updates += 1;
            }
        }
        report.total_seconds += r.sim_elapsed_s;
    }
    report
}
