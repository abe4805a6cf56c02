//! Gradient-ascent drivers for the tabular policy.
//!
//! [`train_baseline`] generates a full group for every sampled prompt;
//! [`train_speed`] routes generation through the screening scheduler. Both
//! apply the same update: the unweighted mean of per-prompt RLOO estimates,
//! scaled by the learning rate. [`one_step_check`] measures one noisy gradient
//! step on a quadratic, where the expected improvement is known exactly.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpeedError};
use crate::estimators::{rloo_advantages, CurriculumShape, RewardVector};
use crate::metrics::{early_update_mean, Counters, IterationKind, MetricsRecord};
use crate::policy::GradientVector;
use crate::rng::RngStream;
use crate::scheduler::{
    run_loop, BufferEntry, CurriculumConfig, Learner, LoopOutcome, SchedulerState, StopCondition, TaskLoader,
    UpdateOutcome,
};
use crate::sim::{Generation, InferenceEngine, InferenceRequest, Phase, RequestItem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_updates: u64,
    /// Population pass rate is evaluated every `eval_interval` steps.
    pub eval_interval: u64,
    pub seed: u64,
    /// Optional simulated-time budget.
    pub max_sim_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            total_updates: 200,
            eval_interval: 1,
            seed: 0,
            max_sim_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.total_updates < 1 {
            return Err(invalid("total_updates must be at least 1"));
        }
        if self.max_sim_seconds.is_some_and(|s| s.is_nan() || s <= 0.0) {
            return Err(invalid("max_sim_seconds must be positive"));
        }
        Ok(())
    }

    fn stop(&self) -> StopCondition {
        StopCondition {
            max_updates: self.total_updates,
            max_sim_seconds: self.max_sim_seconds,
            max_iterations: None,
        }
    }
}

/// Prompts per update and responses per prompt for the unscreened baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub batch_size: usize,
    pub group_size: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            group_size: 24,
        }
    }
}

/// Per-prompt RLOO estimate on the prompt's context row, scored against the
/// distribution each sample was drawn from. Returns the context and the row.
pub fn prompt_gradient(samples: &[Generation]) -> Result<(usize, Vec<f64>)> {
    let rewards = RewardVector::new(samples.iter().map(Generation::reward).collect())?;
    let advantages = rloo_advantages(&rewards)?;
    let mut context = None;
    let mut row: Vec<f64> = Vec::new();
    for (g, &a) in samples.iter().zip(&advantages) {
        let (ctx, score) = g
            .score_row()
            .ok_or_else(|| invalid("sample carries no score snapshot"))?;
        match context {
            None => {
                context = Some(ctx);
                row = vec![0.0; score.len()];
            }
            Some(c) if c != ctx => return Err(invalid("samples of one prompt span two contexts")),
            Some(_) => {}
        }
        if a != 0.0 {
            row.iter_mut().zip(&score).for_each(|(r, s)| *r += a * s);
        }
    }
    let n = samples.len() as f64;
    row.iter_mut().for_each(|r| *r /= n);
    Ok((context.expect("nonempty"), row))
}

/// Applies `θ ← θ + lr · mean_b ĝ_b` to the engine's policy. Engines without a
/// policy only have their batch statistics recorded.
#[derive(Debug, Clone, Copy)]
pub struct RlooLearner {
    pub learning_rate: f64,
}

impl RlooLearner {
    fn step<E: InferenceEngine + ?Sized>(&self, groups: &[&[Generation]], engine: &mut E) -> Result<UpdateOutcome> {
        let samples: usize = groups.iter().map(|g| g.len()).sum();
        let successes: usize = groups.iter().map(|g| g.iter().filter(|s| s.reward()).count()).sum();
        let train_pass_rate = successes as f64 / samples.max(1) as f64;
        let Some(params) = engine.policy_mut() else {
            return Ok(UpdateOutcome {
                grad_norm: None,
                train_pass_rate,
            });
        };
        let m = params.responses();
        let mut direction = GradientVector::zeros(params.param_count());
        for group in groups {
            let (ctx, row) = prompt_gradient(group)?;
            if row.len() != m {
                return Err(SpeedError::DimensionMismatch {
                    expected: m,
                    found: row.len(),
                });
            }
            let base = params.flat_index(ctx, 0);
            let slot = &mut direction.as_mut_slice()[base..base + m];
            slot.iter_mut().zip(&row).for_each(|(d, r)| *d += r);
        }
        direction.scale(1.0 / groups.len() as f64);
        let grad_norm = direction.norm();
        params.ascend(&direction, self.learning_rate)?;
        Ok(UpdateOutcome {
            grad_norm: Some(grad_norm),
            train_pass_rate,
        })
    }
}

impl<E: InferenceEngine + ?Sized> Learner<E> for RlooLearner {
    fn train_step(&mut self, batch: &[BufferEntry], engine: &mut E) -> Result<UpdateOutcome> {
        let groups: Vec<&[Generation]> = batch.iter().map(|e| e.samples.as_slice()).collect();
        self.step(&groups, engine)
    }
}

/// Unscreened RLOO: every update draws `batch_size` prompts from the loader,
/// generates `group_size` responses for each in one engine call, and trains
/// on all of them. Emits an inference record and an update record per step.
pub fn train_baseline<E, L>(
    engine: &mut E,
    loader: &mut L,
    baseline: &BaselineConfig,
    train: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<MetricsRecord>>
where
    E: InferenceEngine + ?Sized,
    L: TaskLoader + ?Sized,
{
    train.validate()?;
    if baseline.batch_size < 1 || baseline.group_size < 2 {
        return Err(invalid("baseline needs batch_size >= 1 and group_size >= 2"));
    }
    let learner = RlooLearner {
        learning_rate: train.learning_rate,
    };
    let eval = train.eval_interval.max(1);
    let update_cost = engine.latency().update_cost;
    let mut counters = Counters::default();
    let mut trace = Vec::new();
    let mut clock = 0.0;
    let mut t = 0u64;
    while t < train.total_updates && !train.max_sim_seconds.is_some_and(|s| clock >= s) {
        let tasks = loader.next_batch(baseline.batch_size, rng);
        let request = InferenceRequest {
            items: tasks
                .iter()
                .map(|&task| RequestItem {
                    task,
                    phase: Phase::Full,
                    n_generations: baseline.group_size,
                })
                .collect(),
        };
        let mut call_rng = rng.split();
        let output = engine
            .generate(&request, &mut call_rng)
            .map_err(|e| SpeedError::Engine {
                iteration: trace.len(),
                step: t as usize,
                source: Box::new(e),
            })?;
        counters.engine_calls += 1;
        counters.inference_iterations += 1;
        counters.prompts_screened += tasks.len() as u64;
        counters.prompts_accepted += tasks.len() as u64;
        clock += output.elapsed;
        trace.push(MetricsRecord {
            kind: IterationKind::Inference,
            t,
            sim_elapsed_s: output.elapsed,
            train_pass_rate: None,
            grad_norm: None,
            accepted_fraction: None,
            population_pass_rate: t.is_multiple_of(eval).then(|| engine.population_pass_rate()),
            engine_calls: counters.engine_calls,
            counters,
        });

        let groups: Vec<&[Generation]> = output.responses.iter().map(Vec::as_slice).collect();
        let update = learner.step(&groups, engine)?;
        t += 1;
        counters.updates += 1;
        clock += update_cost;
        trace.push(MetricsRecord {
            kind: IterationKind::Update,
            t,
            sim_elapsed_s: update_cost,
            train_pass_rate: Some(update.train_pass_rate),
            grad_norm: update.grad_norm,
            accepted_fraction: None,
            population_pass_rate: t.is_multiple_of(eval).then(|| engine.population_pass_rate()),
            engine_calls: counters.engine_calls,
            counters,
        });
    }
    Ok(trace)
}

/// Screened RLOO through the scheduler loop.
pub fn train_speed<E, L>(
    engine: &mut E,
    loader: &mut L,
    curriculum: &CurriculumConfig,
    train: &TrainConfig,
    rng: &mut RngStream,
) -> Result<LoopOutcome>
where
    E: InferenceEngine + ?Sized,
    L: TaskLoader + ?Sized,
{
    train.validate()?;
    let mut learner = RlooLearner {
        learning_rate: train.learning_rate,
    };
    run_loop(
        SchedulerState::new(),
        engine,
        loader,
        &mut learner,
        curriculum,
        train.stop(),
        train.eval_interval,
        rng,
    )
}

/// One noisy gradient step on `J(θ) = −½‖θ − θ*‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothHarnessConfig {
    /// Starting point; its length is the dimension.
    pub theta: Vec<f64>,
    pub target: Vec<f64>,
    /// Signal-to-noise ratio of the gradient estimate; infinite means exact.
    pub snr: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepReport {
    pub snr: f64,
    /// Monte Carlo mean of `J(θ + ĝ) − J(θ)`.
    pub empirical_improvement: f64,
    pub stderr: f64,
    /// `½‖∇J‖²(1 − 1/SNR)`.
    pub bound_rhs: f64,
    /// `½‖∇J‖² − ½ tr Cov[ĝ]`, the exact expectation on this quadratic.
    pub closed_form: f64,
    /// `empirical_improvement − bound_rhs`.
    pub margin: f64,
}

impl OneStepReport {
    /// Floor on the tolerance so an exact (zero-variance) run is judged on
    /// rounding alone.
    fn tolerance(&self, k: f64) -> f64 {
        k * self.stderr + 1e-12 * self.bound_rhs.abs().max(1.0)
    }

    /// Improvement is at least the bound, within `k` standard errors.
    pub fn bound_holds(&self, k: f64) -> bool {
        self.margin >= -self.tolerance(k)
    }

    /// Improvement matches the closed form within `k` standard errors.
    pub fn matches_closed_form(&self, k: f64) -> bool {
        (self.empirical_improvement - self.closed_form).abs() <= self.tolerance(k)
    }
}

/// The step is `θ⁺ = θ + ĝ` with `ĝ = ∇J + ε` and isotropic Gaussian noise
/// `ε` scaled so that `tr Cov[ε] = ‖∇J‖² / SNR`.
pub fn one_step_check(cfg: &SmoothHarnessConfig, rng: &mut RngStream) -> Result<OneStepReport> {
    let d = cfg.theta.len();
    if d == 0 || cfg.target.len() != d {
        return Err(SpeedError::DimensionMismatch {
            expected: d,
            found: cfg.target.len(),
        });
    }
    if cfg.trials < 1000 {
        return Err(invalid("harness needs at least 1000 trials"));
    }
    if cfg.snr.is_nan() || cfg.snr <= 0.0 {
        return Err(invalid("SNR must be positive"));
    }
    let objective = |x: &[f64]| -0.5 * x.iter().zip(&cfg.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let grad: Vec<f64> = cfg.theta.iter().zip(&cfg.target).map(|(a, b)| b - a).collect();
    let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
    let noise_trace = if cfg.snr.is_infinite() { 0.0 } else { grad_sq / cfg.snr };
    let sigma = (noise_trace / d as f64).sqrt();
    let j0 = objective(&cfg.theta);

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut next = vec![0.0; d];
    for _ in 0..cfg.trials {
        for ((n, th), g) in next.iter_mut().zip(&cfg.theta).zip(&grad) {
            let eps: f64 = StandardNormal.sample(rng);
            *n = th + g + sigma * eps;
        }
        let gain = objective(&next) - j0;
        sum += gain;
        sum_sq += gain * gain;
    }
    let t = cfg.trials as f64;
    let mean = sum / t;
    let var = ((sum_sq - t * mean * mean) / (t - 1.0)).max(0.0);
    let bound_rhs = 0.5 * grad_sq * (1.0 - 1.0 / cfg.snr);
    Ok(OneStepReport {
        snr: cfg.snr,
        empirical_improvement: mean,
        stderr: (var / t).sqrt(),
        bound_rhs,
        closed_form: 0.5 * grad_sq - 0.5 * noise_trace,
        margin: mean - bound_rhs,
    })
}

/// Mean statistics of a screened run over its first `fraction` of updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub mean_grad_norm: f64,
    /// Mean of `|train_pass_rate − 0.5|`.
    pub mean_pass_rate_distance: f64,
}

pub fn trace_stats(trace: &[MetricsRecord], fraction: f64) -> Option<TraceStats> {
    Some(TraceStats {
        mean_grad_norm: early_update_mean(trace, fraction, |r| r.grad_norm)?,
        mean_pass_rate_distance: early_update_mean(trace, fraction, |r| r.train_pass_rate.map(|p| (p - 0.5).abs()))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_init: usize,
    pub stats: TraceStats,
    /// Mean over trained prompts of `|realized prompt pass rate − 0.5|`.
    pub mean_selected_distance: f64,
    #[serde(skip)]
    pub trace: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NinitSweepReport {
    pub points: Vec<SweepPoint>,
    /// `n_init` values ordered by increasing mean grad norm.
    pub by_grad_norm: Vec<usize>,
    /// `n_init` values ordered by increasing selected pass-rate distance.
    pub by_selected_distance: Vec<usize>,
}

impl NinitSweepReport {
    /// Selected pass-rate distance from 0.5 is nondecreasing and grad norm
    /// nonincreasing as `n_init` grows (points are sorted by `n_init`).
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| {
            w[1].mean_selected_distance >= w[0].mean_selected_distance
                && w[1].stats.mean_grad_norm <= w[0].stats.mean_grad_norm
        })
    }
}

/// Mean of `|p − 0.5|` over every trained prompt.
pub fn selected_distance(outcome: &LoopOutcome) -> Option<f64> {
    let rates: Vec<f64> = outcome.trained.iter().flatten().map(|e| e.realized_pass_rate).collect();
    (!rates.is_empty()).then(|| rates.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / rates.len() as f64)
}

/// Screened runs at each `n_init`, holding `n_init + n_cont` fixed.
///
/// `make_run` builds a fresh engine and loader for every value, so all runs
/// start from the same state; each run uses `train.seed`.
pub fn ninit_sweep<E, L, F>(
    curriculum: &CurriculumConfig,
    train: &TrainConfig,
    n_init_values: &[usize],
    mut make_run: F,
) -> Result<NinitSweepReport>
where
    E: InferenceEngine,
    L: TaskLoader,
    F: FnMut() -> Result<(E, L)>,
{
    if n_init_values.len() < 2 {
        return Err(invalid("sweep needs at least two n_init values"));
    }
    let total = curriculum.shape.n_total();
    let mut points = Vec::with_capacity(n_init_values.len());
    for &k in n_init_values {
        if k >= total {
            return Err(invalid(format!("n_init {k} leaves no continuation out of {total}")));
        }
        let cfg = CurriculumConfig {
            shape: CurriculumShape::new(k, total - k)?,
            ..*curriculum
        };
        let (mut engine, mut loader) = make_run()?;
        let mut rng = RngStream::new(train.seed);
        let out = train_speed(&mut engine, &mut loader, &cfg, train, &mut rng)?;
        let no_updates = || invalid(format!("n_init {k} produced no updates"));
        let stats = trace_stats(&out.trace, 1.0).ok_or_else(no_updates)?;
        points.push(SweepPoint {
            n_init: k,
            stats,
            mean_selected_distance: selected_distance(&out).ok_or_else(no_updates)?,
            trace: out.trace,
        });
    }
    points.sort_by_key(|p| p.n_init);
    let order_by = |f: &dyn Fn(&SweepPoint) -> f64| {
        let mut v: Vec<&SweepPoint> = points.iter().collect();
        v.sort_by(|a, b| f(a).total_cmp(&f(b)));
        v.iter().map(|p| p.n_init).collect::<Vec<_>>()
    };
    Ok(NinitSweepReport {
        by_grad_norm: order_by(&|p| p.stats.mean_grad_norm),
        by_selected_distance: order_by(&|p| p.mean_selected_distance),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyParams, Sample, ScoreSnapshot, TaskInstance};
    use crate::scheduler::EpochLoader;
    use crate::sim::{LatencyModel, PolicyEngine};

    fn gen(snap: &ScoreSnapshot, y: usize, r: bool) -> Generation {
        Generation {
            sample: Sample {
                response: Some(y),
                reward: r,
            },
            score: Some(snap.clone()),
        }
    }

    #[test]
    fn prompt_gradient_by_hand() {
        let params = PolicyParams::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let snap = ScoreSnapshot::capture(&params, 0).unwrap();
        // Rewards [1, 0]: advantages [1, −1]; scores [½, −½] and [−½, ½].
        let (ctx, row) = prompt_gradient(&[gen(&snap, 0, true), gen(&snap, 1, false)]).unwrap();
        assert_eq!(ctx, 0);
        assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn update_applies_scaled_mean() {
        let params = PolicyParams::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let tasks = vec![
            TaskInstance::policy_backed(0, 0, [0]),
            TaskInstance::policy_backed(1, 1, [1]),
        ];
        let mut engine = PolicyEngine::new(params.clone(), tasks, LatencyModel::default()).unwrap();
        let s0 = ScoreSnapshot::capture(&params, 0).unwrap();
        let s1 = ScoreSnapshot::capture(&params, 1).unwrap();
        let g0 = vec![gen(&s0, 0, true), gen(&s0, 1, false)];
        let g1 = vec![gen(&s1, 1, true), gen(&s1, 0, false), gen(&s1, 1, true)];
        let learner = RlooLearner { learning_rate: 0.3 };
        let out = learner.step(&[&g0, &g1], &mut engine).unwrap();

        let (_, r0) = prompt_gradient(&g0).unwrap();
        let (_, r1) = prompt_gradient(&g1).unwrap();
        let dir = [r0[0] / 2.0, r0[1] / 2.0, r1[0] / 2.0, r1[1] / 2.0];
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert_eq!(out.grad_norm, Some(norm));
        assert_eq!(out.train_pass_rate, 3.0 / 5.0);
        for (i, (&p, d)) in params.as_slice().iter().zip(dir).enumerate() {
            assert_eq!(engine.params().as_slice()[i], p + 0.3 * d);
        }
    }

    #[test]
    fn zero_pass_population_never_moves() {
        let params = PolicyParams::from_rows(&[vec![0.2, -0.1, 0.4], vec![0.0; 3]]).unwrap();
        let tasks = vec![
            TaskInstance::policy_backed(0, 0, []),
            TaskInstance::policy_backed(1, 1, []),
        ];
        let mut engine = PolicyEngine::new(params.clone(), tasks, LatencyModel::default()).unwrap();
        let mut loader = EpochLoader::new(engine.task_ids()).unwrap();
        let train = TrainConfig {
            total_updates: 20,
            ..TrainConfig::default()
        };
        let trace = train_baseline(
            &mut engine,
            &mut loader,
            &BaselineConfig {
                batch_size: 2,
                group_size: 6,
            },
            &train,
            &mut RngStream::new(3),
        )
        .unwrap();
        assert_eq!(engine.params(), &params);
        assert!(trace.iter().filter_map(|r| r.grad_norm).all(|g| g == 0.0));
    }

    #[test]
    fn one_step_exact_gradient_is_tight() {
        let cfg = SmoothHarnessConfig {
            theta: vec![1.0, -2.0, 0.5],
            target: vec![0.0; 3],
            snr: f64::INFINITY,
            trials: 1000,
        };
        let r = one_step_check(&cfg, &mut RngStream::new(0)).unwrap();
        assert!((r.empirical_improvement - 0.5 * 5.25).abs() < 1e-12);
        assert_eq!(r.stderr, 0.0);
        assert!(r.bound_holds(4.0) && r.matches_closed_form(2.0));
    }

    #[test]
    fn one_step_rejects_bad_configs() {
        let mut cfg = SmoothHarnessConfig {
            theta: vec![1.0],
            target: vec![0.0, 0.0],
            snr: 1.0,
            trials: 1000,
        };
        assert!(one_step_check(&cfg, &mut RngStream::new(0)).is_err());
        cfg.target = vec![0.0];
        cfg.trials = 999;
        assert!(one_step_check(&cfg, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            total_updates: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
