//! Screening scheduler with a sampling buffer and pre-fetched inference.
//!
//! Each inference iteration issues exactly one engine call that carries two
//! kinds of work: continuation generations for prompts admitted in the
//! previous call, and screening generations for a fresh batch from the
//! loader. Admitted prompts wait in the accepted cache until their
//! continuation returns, then move to the buffer with all of their samples.
//! Training iterations run whenever the buffer holds at least one full batch.
//!
//! The accepted cache is replaced after every call: it only ever holds
//! prompts whose continuation has not been generated yet.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpeedError};
use crate::estimators::{CurriculumShape, RewardVector};
use crate::metrics::{Counters, IterationKind, MetricsRecord};
use crate::policy::TaskId;
use crate::rng::RngStream;
use crate::sim::{EngineOutput, Generation, InferenceEngine, InferenceRequest, Phase, RequestItem};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferPolicy {
    /// Oldest entries first.
    #[default]
    Fifo,
    /// Uniform subset without replacement.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub shape: CurriculumShape,
    pub p_low: f64,
    pub p_high: f64,
    pub train_batch_size: usize,
    pub generation_batch_size: usize,
    pub buffer_policy: BufferPolicy,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            shape: CurriculumShape::new(4, 20).expect("valid default shape"),
            p_low: 0.0,
            p_high: 1.0,
            train_batch_size: 16,
            generation_batch_size: 64,
            buffer_policy: BufferPolicy::Fifo,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_low && self.p_low < self.p_high && self.p_high <= 1.0) {
            return Err(invalid(format!(
                "thresholds must satisfy 0 <= p_low < p_high <= 1 (got {}, {})",
                self.p_low, self.p_high
            )));
        }
        if self.train_batch_size < 1 || self.generation_batch_size < 1 {
            return Err(invalid("batch sizes must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of the screening phase for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningResult {
    pub task: TaskId,
    pub rewards: RewardVector,
    pub success_count: usize,
    /// `success_count / n_init`.
    pub estimate: f64,
    /// Screening samples, kept for the update.
    pub retained: Vec<Generation>,
    /// Engine call that produced the screening samples.
    pub screened_call: u64,
}

impl ScreeningResult {
    pub fn from_generations(task: TaskId, retained: Vec<Generation>) -> Result<Self> {
        let rewards = RewardVector::new(retained.iter().map(Generation::reward).collect())?;
        let success_count = rewards.successes();
        Ok(Self {
            task,
            estimate: success_count as f64 / rewards.len() as f64,
            rewards,
            success_count,
            retained,
            screened_call: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

/// Admit iff `p_low < estimate < p_high`.
pub fn screen(result: &ScreeningResult, cfg: &CurriculumConfig) -> Decision {
    if cfg.p_low < result.estimate && result.estimate < cfg.p_high {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

/// A prompt with its full group of samples, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub task: TaskId,
    /// Screening samples followed by continuation samples.
    pub samples: Vec<Generation>,
    /// Training step at which the entry entered the buffer.
    pub enqueue_step: u64,
    /// Engine calls that produced the screening and continuation samples.
    pub screened_call: u64,
    pub completed_call: u64,
    pub screening_estimate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SchedulerState {
    pub buffer: VecDeque<BufferEntry>,
    /// Admitted prompts awaiting continuation.
    pub accepted: Vec<ScreeningResult>,
    /// The accepted cache has been placed in a request that has not been
    /// ingested yet.
    pub in_flight: bool,
    pub t: u64,
    pub counters: Counters,
}

impl BufferEntry {
    /// Share of correct samples over the full group.
    pub fn realized_pass_rate(&self) -> f64 {
        let wins = self.samples.iter().filter(|s| s.reward()).count();
        wins as f64 / self.samples.len().max(1) as f64
    }
}

impl SchedulerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Build the single request for the next engine call: continuation for every
/// accepted prompt followed by screening for every new task.
pub fn assemble_inference_request(
    state: &mut SchedulerState,
    new_tasks: &[TaskId],
    cfg: &CurriculumConfig,
) -> Result<InferenceRequest> {
    if new_tasks.len() > cfg.generation_batch_size {
        return Err(invalid(format!(
            "{} new tasks exceed the generation batch size {}",
            new_tasks.len(),
            cfg.generation_batch_size
        )));
    }
    if state.in_flight {
        return Err(invalid("previous request has not been ingested"));
    }
    let continuation = state.accepted.iter().map(|a| RequestItem {
        task: a.task,
        phase: Phase::Continuation,
        n_generations: cfg.shape.n_cont(),
    });
    let screening = new_tasks.iter().map(|&task| RequestItem {
        task,
        phase: Phase::Screening,
        n_generations: cfg.shape.n_init(),
    });
    state.in_flight = true;
    Ok(InferenceRequest {
        items: continuation.chain(screening).collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOutcome {
    /// Tasks moved to the buffer, in request order.
    pub buffered: Vec<TaskId>,
    pub screened: usize,
    pub accepted: usize,
}

/// Fold one engine call's responses into the scheduler state.
pub fn ingest_responses(
    state: &mut SchedulerState,
    request: &InferenceRequest,
    responses: Vec<Vec<Generation>>,
    cfg: &CurriculumConfig,
) -> Result<IngestOutcome> {
    if !state.in_flight {
        return Err(SpeedError::ResponseMismatch("no request in flight".into()));
    }
    if responses.len() != request.items.len() {
        return Err(SpeedError::ResponseMismatch(format!(
            "{} response slots for {} request items",
            responses.len(),
            request.items.len()
        )));
    }
    let n_cont = state.accepted.len();
    for (i, (item, resp)) in request.items.iter().zip(&responses).enumerate() {
        if resp.len() != item.n_generations {
            return Err(SpeedError::ResponseMismatch(format!(
                "item {i} ({}) expected {} generations, got {}",
                item.task,
                item.n_generations,
                resp.len()
            )));
        }
        let expected = if i < n_cont {
            (Phase::Continuation, cfg.shape.n_cont(), Some(state.accepted[i].task))
        } else {
            (Phase::Screening, cfg.shape.n_init(), None)
        };
        if item.phase != expected.0 || item.n_generations != expected.1 || expected.2.is_some_and(|t| t != item.task) {
            return Err(SpeedError::ResponseMismatch(format!(
                "item {i} ({}) does not match the accepted cache layout",
                item.task
            )));
        }
    }

    let mut outcome = IngestOutcome::default();
    let mut responses = responses.into_iter();
    let calls = state.counters.engine_calls;
    let accepted = std::mem::take(&mut state.accepted);
    for (screened, continuation) in accepted.into_iter().zip(responses.by_ref()) {
        let mut samples = screened.retained;
        samples.extend(continuation);
        outcome.buffered.push(screened.task);
        state.buffer.push_back(BufferEntry {
            task: screened.task,
            samples,
            enqueue_step: state.t,
            screened_call: screened.screened_call,
            completed_call: calls,
            screening_estimate: screened.estimate,
        });
    }
    for (item, resp) in request.items[n_cont..].iter().zip(responses) {
        let mut result = ScreeningResult::from_generations(item.task, resp)?;
        result.screened_call = calls;
        outcome.screened += 1;
        state.counters.prompts_screened += 1;
        match screen(&result, cfg) {
            Decision::Accept => {
                outcome.accepted += 1;
                state.counters.prompts_accepted += 1;
                state.accepted.push(result);
            }
            Decision::Reject => state.counters.prompts_rejected += 1,
        }
    }
    state.in_flight = false;
    state.counters.buffer_high_water = state.counters.buffer_high_water.max(state.buffer.len() as u64);
    Ok(outcome)
}

/// Remove exactly `train_batch_size` entries from the buffer.
pub fn draw_training_batch(
    state: &mut SchedulerState,
    cfg: &CurriculumConfig,
    rng: &mut RngStream,
) -> Result<Vec<BufferEntry>> {
    let b = cfg.train_batch_size;
    if state.buffer.len() < b {
        return Err(SpeedError::BufferUnderflow {
            needed: b,
            available: state.buffer.len(),
        });
    }
    match cfg.buffer_policy {
        BufferPolicy::Fifo => Ok(state.buffer.drain(..b).collect()),
        BufferPolicy::UniformRandom => {
            let n = state.buffer.len();
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..b {
                let j = i + rng.index(n - i);
                idx.swap(i, j);
            }
            let mut chosen = vec![false; n];
            for &i in &idx[..b] {
                chosen[i] = true;
            }
            let mut slots: Vec<Option<BufferEntry>> = state.buffer.drain(..).map(Some).collect();
            let batch = idx[..b].iter().map(|&i| slots[i].take().expect("distinct")).collect();
            state.buffer = slots.into_iter().flatten().collect();
            Ok(batch)
        }
    }
}

/// Source of prompts, cycled in epochs.
pub trait TaskLoader {
    fn next_batch(&mut self, n: usize, rng: &mut RngStream) -> Vec<TaskId>;
}

/// Reshuffles the task list at the start of every epoch.
#[derive(Debug, Clone)]
pub struct EpochLoader {
    tasks: Vec<TaskId>,
    order: Vec<TaskId>,
    cursor: usize,
    epoch: u64,
}

impl EpochLoader {
    pub fn new(tasks: Vec<TaskId>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(invalid("loader needs at least one task"));
        }
        Ok(Self {
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            tasks,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl TaskLoader for EpochLoader {
    fn next_batch(&mut self, n: usize, rng: &mut RngStream) -> Vec<TaskId> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order = self.tasks.clone();
                for i in (1..self.order.len()).rev() {
                    let j = rng.index(i + 1);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
                self.epoch += 1;
            }
            let take = (n - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// What a training iteration reports back to the loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    /// `None` when the engine has no trainable policy.
    pub grad_norm: Option<f64>,
    pub train_pass_rate: f64,
}

/// The training action of the loop.
pub trait Learner<E: InferenceEngine + ?Sized> {
    fn train_step(&mut self, batch: &[BufferEntry], engine: &mut E) -> Result<UpdateOutcome>;
}

/// Loop budget. The loop stops at whichever limit is hit first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCondition {
    pub max_updates: u64,
    pub max_sim_seconds: Option<f64>,
    pub max_iterations: Option<u64>,
}

impl StopCondition {
    pub fn updates(max_updates: u64) -> Self {
        Self {
            max_updates,
            max_sim_seconds: None,
            max_iterations: None,
        }
    }
}

/// Bookkeeping for one buffer entry consumed by an update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainedEntry {
    pub task: TaskId,
    pub samples: usize,
    pub screening_estimate: f64,
    pub realized_pass_rate: f64,
    pub screened_call: u64,
    pub completed_call: u64,
    /// Engine calls between completion and training.
    pub staleness: u64,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub state: SchedulerState,
    pub trace: Vec<MetricsRecord>,
    /// Entries consumed by each update, in draw order.
    pub trained: Vec<Vec<TrainedEntry>>,
}

/// Alternate inference and training iterations until the budget runs out.
///
/// When the buffer holds fewer than `train_batch_size` entries the loop
/// issues one engine call; otherwise it trains on one batch. Prompts still
/// in the accepted cache when the budget runs out are dropped and counted.
#[allow(clippy::too_many_arguments)]
pub fn run_loop<E, L, T>(
    mut state: SchedulerState,
    engine: &mut E,
    loader: &mut L,
    learner: &mut T,
    cfg: &CurriculumConfig,
    stop: StopCondition,
    eval_interval: u64,
    rng: &mut RngStream,
) -> Result<LoopOutcome>
where
    E: InferenceEngine + ?Sized,
    L: TaskLoader + ?Sized,
    T: Learner<E> + ?Sized,
{
    cfg.validate()?;
    let eval_interval = eval_interval.max(1);
    let update_cost = engine.latency().update_cost;
    let mut trace = Vec::new();
    let mut trained = Vec::new();
    let mut clock = 0.0;
    let mut iterations = 0u64;

    while state.t < stop.max_updates {
        if stop.max_sim_seconds.is_some_and(|limit| clock >= limit)
            || stop.max_iterations.is_some_and(|limit| iterations >= limit)
        {
            break;
        }
        if state.buffer.len() < cfg.train_batch_size {
            let new_tasks = loader.next_batch(cfg.generation_batch_size, rng);
            let request = assemble_inference_request(&mut state, &new_tasks, cfg)?;
            let mut call_rng = rng.split();
            let EngineOutput { responses, elapsed } =
                engine
                    .generate(&request, &mut call_rng)
                    .map_err(|e| SpeedError::Engine {
                        iteration: iterations as usize,
                        step: state.t as usize,
                        source: Box::new(e),
                    })?;
            state.counters.engine_calls += 1;
            state.counters.inference_iterations += 1;
            let outcome = ingest_responses(&mut state, &request, responses, cfg)?;
            clock += elapsed;
            trace.push(MetricsRecord {
                kind: IterationKind::Inference,
                t: state.t,
                sim_elapsed_s: elapsed,
                train_pass_rate: None,
                grad_norm: None,
                accepted_fraction: (outcome.screened > 0).then(|| outcome.accepted as f64 / outcome.screened as f64),
                population_pass_rate: state
                    .t
                    .is_multiple_of(eval_interval)
                    .then(|| engine.population_pass_rate()),
                engine_calls: state.counters.engine_calls,
                counters: state.counters,
            });
        } else {
            let mut draw_rng = rng.split();
            let batch = draw_training_batch(&mut state, cfg, &mut draw_rng)?;
            let calls = state.counters.engine_calls;
            trained.push(
                batch
                    .iter()
                    .map(|e| TrainedEntry {
                        task: e.task,
                        samples: e.samples.len(),
                        screening_estimate: e.screening_estimate,
                        realized_pass_rate: e.realized_pass_rate(),
                        screened_call: e.screened_call,
                        completed_call: e.completed_call,
                        staleness: calls - e.completed_call,
                    })
                    .collect(),
            );
            let update = learner.train_step(&batch, engine)?;
            state.t += 1;
            state.counters.updates += 1;
            clock += update_cost;
            trace.push(MetricsRecord {
                kind: IterationKind::Update,
                t: state.t,
                sim_elapsed_s: update_cost,
                train_pass_rate: Some(update.train_pass_rate),
                grad_norm: update.grad_norm,
                accepted_fraction: None,
                population_pass_rate: state
                    .t
                    .is_multiple_of(eval_interval)
                    .then(|| engine.population_pass_rate()),
                engine_calls: state.counters.engine_calls,
                counters: state.counters,
            });
        }
        iterations += 1;
    }
    state.counters.dropped_at_shutdown += state.accepted.len() as u64;
    state.accepted.clear();
    Ok(LoopOutcome { state, trace, trained })
}
