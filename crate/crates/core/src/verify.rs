//! Self-checks of the estimator theory and the scheduler contracts.
//!
//! Every check is deterministic given its seed. The building blocks are
//! public so integration tests can run them at their own sizes; [`run_suite`]
//! bundles them into a pass/fail report for the command line.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result, SpeedError};
use crate::estimators::enumerate::{gradient_estimator_moments_with, EnumerationStrategy};
use crate::estimators::{
    phi, phi_prime, screened_gradient_exact, snr_bound_proof, snr_bound_theorem, snr_exact, BoundStatus,
    CurriculumShape, DEFAULT_ENUMERATION_CAP,
};
use crate::metrics::to_jsonl;
use crate::policy::{pass_rate_exact, pass_rate_grad_exact, PolicyParams, TaskInstance};
use crate::rng::RngStream;
use crate::scheduler::{
    run_loop, BufferPolicy, CurriculumConfig, EpochLoader, LoopOutcome, SchedulerState, StopCondition,
};
use crate::sim::{make_policy_population, InferenceEngine, LatencyModel, PolicyEngine, PopulationSpec};
use crate::trainer::{one_step_check, OneStepReport, RlooLearner, SmoothHarnessConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Snr,
    Phi,
    Scheduler,
    OneStep,
}

impl FromStr for Suite {
    type Err = SpeedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "snr" => Ok(Self::Snr),
            "phi" => Ok(Self::Phi),
            "scheduler" => Ok(Self::Scheduler),
            "one-step" => Ok(Self::OneStep),
            other => Err(invalid(format!("unknown suite `{other}`"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::All => "all",
            Self::Snr => "snr",
            Self::Phi => "phi",
            Self::Scheduler => "scheduler",
            Self::OneStep => "one-step",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A bound that should hold was violated by a computed value.
    Discrepancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    /// Bound-chain violations, if any.
    pub discrepancies: Vec<BoundDiscrepancy>,
}

impl VerifyReport {
    fn push(&mut self, suite: Suite, name: &str, ok: bool, detail: String) {
        self.checks.push(Check {
            suite,
            name: name.to_string(),
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
        });
    }

    pub fn has_failures(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Fail)
    }

    pub fn has_discrepancies(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Discrepancy)
    }

    /// 0 when everything passed, 1 on any failure, 3 when the only problems
    /// are bound-chain discrepancies.
    pub fn exit_code(&self) -> i32 {
        if self.has_failures() {
            1
        } else if self.has_discrepancies() {
            3
        } else {
            0
        }
    }
}

/// Random tabular instance: `1..=max_contexts` contexts, `2..=max_responses`
/// responses, logits uniform in `[-2, 2]` and a uniformly random correct set
/// (possibly empty or full) on a random context.
pub fn random_instance(rng: &mut RngStream, max_contexts: usize, max_responses: usize) -> (PolicyParams, TaskInstance) {
    let k = 1 + rng.index(max_contexts);
    let m = 2 + rng.index(max_responses - 1);
    let logits = (0..k * m).map(|_| 4.0 * rng.uniform() - 2.0).collect();
    let params = PolicyParams::from_flat(k, m, logits).expect("shape matches");
    let context = rng.index(k);
    let correct: Vec<usize> = (0..m).filter(|_| rng.uniform() < 0.5).collect();
    (params, TaskInstance::policy_backed(0, context, correct))
}

/// Largest `|E ĝ − ∇P|` entry over `instances` random instances, with the
/// mean taken by walking every response tuple. Group sizes are drawn from
/// `2..=max_n`.
pub fn unbiasedness_max_deviation(
    instances: usize,
    max_contexts: usize,
    max_responses: usize,
    max_n: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (params, task) = random_instance(rng, max_contexts, max_responses);
        let n = 2 + rng.index(max_n - 1);
        let moments =
            gradient_estimator_moments_with(&params, &task, n, EnumerationStrategy::Tuples, DEFAULT_ENUMERATION_CAP)?;
        let exact = pass_rate_grad_exact(&params, &task)?;
        worst = worst.max(moments.mean.max_abs_diff(&exact));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityDeviation {
    /// Largest `|screened − Φ′(P)·∇P|` entry.
    pub identity: f64,
    /// Largest `|screened − ∇(Φ∘P)|` entry, derivative by central differences.
    pub finite_difference: f64,
    pub instances: usize,
}

/// Checks that screening reweights the expected gradient by `Φ′(P)` on
/// random instances with `n_init, n_cont ∈ 1..=max_shape`.
pub fn screened_identity(instances: usize, max_shape: usize, rng: &mut RngStream) -> Result<IdentityDeviation> {
    let h = 1e-5;
    let mut out = IdentityDeviation {
        identity: 0.0,
        finite_difference: 0.0,
        instances,
    };
    for _ in 0..instances {
        let (params, task) = random_instance(rng, 2, 4);
        let shape = CurriculumShape::new(1 + rng.index(max_shape), 1 + rng.index(max_shape))?;
        let screened = screened_gradient_exact(&params, &task, shape)?;
        let p = pass_rate_exact(&params, &task)?;
        let mut predicted = pass_rate_grad_exact(&params, &task)?;
        predicted.scale(phi_prime(p, shape));
        out.identity = out.identity.max(screened.max_abs_diff(&predicted));
        for j in 0..params.param_count() {
            let up = phi(pass_rate_exact(&params.perturbed(j, h), &task)?, shape);
            let down = phi(pass_rate_exact(&params.perturbed(j, -h), &task)?, shape);
            let fd = (up - down) / (2.0 * h);
            out.finite_difference = out.finite_difference.max((fd - screened.as_slice()[j]).abs());
        }
    }
    Ok(out)
}

/// Smallest `Φ′(p)` over a `points`-point grid on `[0, 1]` and every shape
/// with `n_init ≤ max_init`, `n_cont ≤ max_cont`, with its location.
pub fn phi_min_derivative(points: usize, max_init: usize, max_cont: usize) -> (f64, usize, usize, f64) {
    let mut worst = (f64::INFINITY, 0, 0, 0.0);
    for k in 1..=max_init {
        for c in 1..=max_cont {
            let shape = CurriculumShape::new(k, c).expect("positive sizes");
            for i in 0..points {
                let p = i as f64 / (points - 1) as f64;
                let d = phi_prime(p, shape);
                if d < worst.0 {
                    worst = (d, k, c, p);
                }
            }
        }
    }
    worst
}

/// SNR along one logit path `θ + s·1_C`, `s ∈ [−20, 20]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitPath {
    pub peak: f64,
    /// SNR at `s = −20` (pass rate near 0).
    pub low_end: f64,
    /// SNR at `s = +20` (pass rate near 1).
    pub high_end: f64,
}

impl LimitPath {
    /// Both ends fall below `fraction` of the peak.
    pub fn vanishes(&self, fraction: f64) -> bool {
        self.peak > 0.0 && self.low_end < fraction * self.peak && self.high_end < fraction * self.peak
    }
}

/// `paths` random single-context instances with a nonempty proper correct
/// set; the correct logits are shifted by `s` along each path.
pub fn snr_limit_paths(paths: usize, n: usize, rng: &mut RngStream) -> Result<Vec<LimitPath>> {
    let steps = 81;
    let mut out = Vec::with_capacity(paths);
    for _ in 0..paths {
        let m = 2 + rng.index(3);
        let base: Vec<f64> = (0..m).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let size = 1 + rng.index(m - 1);
        let mut ids: Vec<usize> = (0..m).collect();
        for i in 0..size {
            let j = i + rng.index(m - i);
            ids.swap(i, j);
        }
        let correct = ids[..size].to_vec();
        let task = TaskInstance::policy_backed(0, 0, correct.iter().copied());
        let mut values = Vec::with_capacity(steps);
        for i in 0..steps {
            let s = -20.0 + 40.0 * i as f64 / (steps - 1) as f64;
            let mut row = base.clone();
            correct.iter().for_each(|&y| row[y] += s);
            let params = PolicyParams::from_rows(&[row])?;
            values.push(snr_exact(&params, &task, n)?.ratio.unwrap_or(0.0));
        }
        out.push(LimitPath {
            peak: values.iter().copied().fold(0.0, f64::max),
            low_end: values[0],
            high_end: values[steps - 1],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub n: usize,
    pub responses: usize,
    pub pass_rate: f64,
    pub snr: f64,
    pub proof_bound: f64,
    pub proof_status: BoundStatus,
    pub theorem_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundRelation {
    SnrBelowProofBound,
    ProofBelowTheoremBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundDiscrepancy {
    pub point: BoundPoint,
    pub relation: BoundRelation,
    /// Amount by which the left side exceeds the right side.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundChainReport {
    pub points: Vec<BoundPoint>,
    pub discrepancies: Vec<BoundDiscrepancy>,
}

/// Single-context instance with one correct response out of `responses`
/// whose pass rate is `p`.
pub fn instance_with_pass_rate(p: f64, responses: usize) -> Result<(PolicyParams, TaskInstance)> {
    if !(0.0 < p && p < 1.0) || responses < 2 {
        return Err(invalid("engineered instance needs 0 < p < 1 and two responses"));
    }
    let mut row = vec![0.0; responses];
    row[0] = (p * (responses - 1) as f64 / (1.0 - p)).ln();
    Ok((PolicyParams::from_rows(&[row])?, TaskInstance::policy_backed(0, 0, [0])))
}

/// `snr ≤ proof bound ≤ theorem bound` on the grid `p = i/100` restricted to
/// the region where the theorem bound is claimed (`p < 1/4` or `p > 3/4`).
/// Bounds are evaluated at the instance's realized pass rate.
pub fn bound_chain(ns: &[usize], responses: &[usize], tol: f64) -> Result<BoundChainReport> {
    let mut report = BoundChainReport {
        points: Vec::new(),
        discrepancies: Vec::new(),
    };
    for &n in ns {
        for &m in responses {
            for i in 1..100 {
                let nominal = i as f64 / 100.0;
                if !!(0.25..=0.75).contains(&nominal) {
                    continue;
                }
                let (params, task) = instance_with_pass_rate(nominal, m)?;
                let p = pass_rate_exact(&params, &task)?;
                let theorem = snr_bound_theorem(p, n)?;
                if !theorem.valid {
                    continue;
                }
                let proof = snr_bound_proof(p, n)?;
                let point = BoundPoint {
                    n,
                    responses: m,
                    pass_rate: p,
                    snr: snr_exact(&params, &task, n)?.ratio.unwrap_or(0.0),
                    proof_bound: proof.value,
                    proof_status: proof.status,
                    theorem_bound: theorem.value,
                };
                let mut flag = |relation, lhs: f64, rhs: f64| {
                    if lhs > rhs + tol {
                        report.discrepancies.push(BoundDiscrepancy {
                            point,
                            relation,
                            excess: lhs - rhs,
                        });
                    }
                };
                flag(BoundRelation::SnrBelowProofBound, point.snr, point.proof_bound);
                flag(
                    BoundRelation::ProofBelowTheoremBound,
                    point.proof_bound,
                    point.theorem_bound,
                );
                report.points.push(point);
            }
        }
    }
    Ok(report)
}

/// Quadratic-harness runs at SNR ∈ {∞, 2, 1, 0.5}.
pub fn one_step_suite(trials: usize, seed: u64) -> Result<Vec<OneStepReport>> {
    let mut rng = RngStream::new(seed);
    [f64::INFINITY, 2.0, 1.0, 0.5]
        .into_iter()
        .map(|snr| {
            let cfg = SmoothHarnessConfig {
                theta: vec![1.0, -0.5, 2.0, 0.25],
                target: vec![0.0; 4],
                snr,
                trials,
            };
            one_step_check(&cfg, &mut rng.split())
        })
        .collect()
}

/// Settings of the seeded scheduler run used for trace regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldenRunConfig {
    pub seed: u64,
    pub iterations: u64,
    pub population: PopulationSpec,
    pub responses: usize,
    pub learning_rate: f64,
    pub curriculum: CurriculumConfig,
}

impl Default for GoldenRunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            iterations: 500,
            population: PopulationSpec {
                size: 64,
                zero_mass: 0.34,
                one_mass: 0.10,
                alpha: 1.0,
                beta: 1.0,
                extreme_gap: 0.005,
            },
            responses: 4,
            learning_rate: 5.0,
            curriculum: CurriculumConfig::default(),
        }
    }
}

/// SHA-256 of the metrics stream of [`golden_run`] with default settings.
pub const GOLDEN_TRACE_DIGEST: &str = "62e7239015d39c262be452ec063b3c86eb188bcb6998a95b863b008370c37767";

pub fn golden_run(cfg: &GoldenRunConfig) -> Result<LoopOutcome> {
    let mut pop_rng = RngStream::with_stream(cfg.seed, 1);
    let (params, tasks) = make_policy_population(&cfg.population, cfg.responses, &mut pop_rng)?;
    let mut engine = PolicyEngine::new(params, tasks, LatencyModel::default())?;
    let mut loader = EpochLoader::new(engine.task_ids())?;
    let mut learner = RlooLearner {
        learning_rate: cfg.learning_rate,
    };
    let stop = StopCondition {
        max_updates: u64::MAX,
        max_sim_seconds: None,
        max_iterations: Some(cfg.iterations),
    };
    run_loop(
        SchedulerState::new(),
        &mut engine,
        &mut loader,
        &mut learner,
        &cfg.curriculum,
        stop,
        1,
        &mut RngStream::new(cfg.seed),
    )
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One named contract check over a finished loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractCheck {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

/// Audits a finished loop against the scheduler contracts.
pub fn audit_loop(outcome: &LoopOutcome, cfg: &CurriculumConfig) -> Vec<ContractCheck> {
    use crate::metrics::IterationKind;
    let mut checks = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| {
        checks.push(ContractCheck {
            name: name.into(),
            ok,
            detail,
        })
    };
    let n_total = cfg.shape.n_total();
    let b = cfg.train_batch_size;

    let bad_batch = outcome.trained.iter().position(|batch| batch.len() != b);
    check(
        "batch-size-constancy",
        bad_batch.is_none(),
        format!(
            "{} updates, batch size {b}, first violation {bad_batch:?}",
            outcome.trained.len()
        ),
    );

    let inference = outcome
        .trace
        .iter()
        .filter(|r| r.kind == IterationKind::Inference)
        .count() as u64;
    let mut prev_calls = 0;
    let mut steps_ok = true;
    for r in &outcome.trace {
        let expected = prev_calls + u64::from(r.kind == IterationKind::Inference);
        steps_ok &= r.engine_calls == expected;
        prev_calls = r.engine_calls;
    }
    let calls = outcome.state.counters.engine_calls;
    check(
        "one-call-per-inference-iteration",
        steps_ok && calls == inference && outcome.state.counters.inference_iterations == inference,
        format!("{calls} engine calls, {inference} inference iterations"),
    );

    let wrong_size = outcome
        .trained
        .iter()
        .flatten()
        .filter(|e| e.samples != n_total)
        .count();
    check(
        "samples-per-trained-prompt",
        wrong_size == 0,
        format!("{wrong_size} trained prompts without exactly {n_total} samples"),
    );

    let unscreened = outcome
        .trained
        .iter()
        .flatten()
        .filter(|e| !(cfg.p_low < e.screening_estimate && e.screening_estimate < cfg.p_high))
        .count();
    check(
        "trained-prompts-passed-screening",
        unscreened == 0,
        format!("{unscreened} trained prompts outside ({}, {})", cfg.p_low, cfg.p_high),
    );

    let split = outcome
        .trained
        .iter()
        .flatten()
        .filter(|e| e.completed_call != e.screened_call + 1)
        .count();
    check(
        "two-call-span",
        split == 0,
        format!("{split} trained prompts not completed by the call after screening"),
    );

    // Only a FIFO drain guarantees oldest-first batches.
    if cfg.buffer_policy == BufferPolicy::Fifo {
        let unordered = outcome
            .trained
            .iter()
            .filter(|batch| batch.windows(2).any(|w| w[0].staleness < w[1].staleness))
            .count();
        check(
            "staleness-ordered",
            unordered == 0,
            format!("{unordered} batches with staleness increasing along the queue"),
        );
    }

    let c = outcome.state.counters;
    check(
        "screening-counters",
        c.prompts_screened == c.prompts_accepted + c.prompts_rejected,
        format!(
            "screened {} accepted {} rejected {}",
            c.prompts_screened, c.prompts_accepted, c.prompts_rejected
        ),
    );
    checks
}

/// Run the named suite at command-line sizes.
pub fn run_suite(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let wants = |s: Suite| suite == Suite::All || suite == s;
    let mut rng = RngStream::new(seed);

    if wants(Suite::Snr) {
        let dev = unbiasedness_max_deviation(200, 2, 4, 4, &mut rng.split())?;
        report.push(
            Suite::Snr,
            "unbiasedness",
            dev <= 1e-10,
            format!("max deviation {dev:.3e}"),
        );

        let paths = snr_limit_paths(20, 4, &mut rng.split())?;
        let failing = paths.iter().filter(|p| !p.vanishes(1e-3)).count();
        report.push(
            Suite::Snr,
            "vanishing-at-extremes",
            failing == 0,
            format!("{failing} of {} paths keep SNR above 1e-3 of peak", paths.len()),
        );

        let chain = bound_chain(&[3, 4], &[2, 3, 4], 1e-9)?;
        let status = if chain.discrepancies.is_empty() {
            CheckStatus::Pass
        } else {
            CheckStatus::Discrepancy
        };
        report.checks.push(Check {
            suite: Suite::Snr,
            name: "bound-chain".into(),
            status,
            detail: format!(
                "{} grid points, {} violations",
                chain.points.len(),
                chain.discrepancies.len()
            ),
        });
        report.discrepancies.extend(chain.discrepancies);
    }

    if wants(Suite::Phi) {
        let (min, k, c, p) = phi_min_derivative(1001, 8, 23);
        report.push(
            Suite::Phi,
            "monotone",
            min >= -1e-12,
            format!("min derivative {min:.3e} at n_init={k} n_cont={c} p={p}"),
        );
        let dev = screened_identity(100, 3, &mut rng.split())?;
        report.push(
            Suite::Phi,
            "screened-gradient-identity",
            dev.identity <= 1e-8,
            format!("max deviation {:.3e}", dev.identity),
        );
        report.push(
            Suite::Phi,
            "finite-difference",
            dev.finite_difference <= 1e-5,
            format!("max deviation {:.3e}", dev.finite_difference),
        );
    }

    if wants(Suite::Scheduler) {
        let cfg = GoldenRunConfig::default();
        let first = golden_run(&cfg)?;
        let second = golden_run(&cfg)?;
        let a = to_jsonl(&first.trace);
        let b = to_jsonl(&second.trace);
        report.push(
            Suite::Scheduler,
            "deterministic",
            a == b,
            format!("{} records", first.trace.len()),
        );
        let digest = digest_hex(a.as_bytes());
        report.push(
            Suite::Scheduler,
            "golden-trace",
            digest == GOLDEN_TRACE_DIGEST,
            format!("digest {digest}"),
        );
        for c in audit_loop(&first, &cfg.curriculum) {
            report.push(Suite::Scheduler, &c.name, c.ok, c.detail);
        }
    }

    if wants(Suite::OneStep) {
        for r in one_step_suite(100_000, rng.next_u64())? {
            report.push(
                Suite::OneStep,
                &format!("snr-{}", r.snr),
                r.bound_holds(4.0) && r.matches_closed_form(2.0),
                format!(
                    "improvement {:.6} ± {:.6}, bound {:.6}, closed form {:.6}",
                    r.empirical_improvement, r.stderr, r.bound_rhs, r.closed_form
                ),
            );
        }
    }
    Ok(report)
}
