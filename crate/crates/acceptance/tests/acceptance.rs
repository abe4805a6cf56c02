//! Acceptance criteria, one line per criterion.
//!
//! Runs without the libtest harness so every line prints even when an
//! earlier criterion fails. Exits nonzero if any criterion fails.
//!
//! Criteria 8 to 10 share one pre-registered setup: 200 policy-backed tasks
//! with four responses each, 34% near-zero and 10% near-one pass-rate mass
//! at a 0.005 gap, a uniform body, learning rate 5, default latency and
//! curriculum, seeds 0 to 2.

use std::time::{Duration, Instant};

use speedlab::metrics::{time_to_target, to_jsonl};
use speedlab::policy::{PolicyParams, TaskInstance};
use speedlab::rng::RngStream;
use speedlab::scheduler::{CurriculumConfig, EpochLoader};
use speedlab::sim::{make_policy_population, InferenceEngine, LatencyModel, PolicyEngine, PopulationSpec};
use speedlab::trainer::{ninit_sweep, trace_stats, train_baseline, train_speed, BaselineConfig, TrainConfig};
use speedlab::verify::{
    audit_loop, bound_chain, digest_hex, golden_run, one_step_suite, phi_min_derivative, screened_identity,
    snr_limit_paths, unbiasedness_max_deviation, GoldenRunConfig, GOLDEN_TRACE_DIGEST,
};

const SEEDS: [u64; 3] = [0, 1, 2];

type Verdict = (bool, String);
type Criterion = (&'static str, fn() -> Verdict);

fn population() -> PopulationSpec {
    PopulationSpec {
        size: 200,
        zero_mass: 0.34,
        one_mass: 0.10,
        alpha: 1.0,
        beta: 1.0,
        extreme_gap: 0.005,
    }
}

fn start(seed: u64) -> (PolicyParams, Vec<TaskInstance>) {
    make_policy_population(&population(), 4, &mut RngStream::with_stream(seed, 1)).expect("population")
}

fn engine(start: &(PolicyParams, Vec<TaskInstance>)) -> (PolicyEngine, EpochLoader) {
    let e = PolicyEngine::new(start.0.clone(), start.1.clone(), LatencyModel::default()).expect("engine");
    let l = EpochLoader::new(e.task_ids()).expect("loader");
    (e, l)
}

fn train(seed: u64, total_updates: u64, eval_interval: u64, max_sim_seconds: Option<f64>) -> TrainConfig {
    TrainConfig {
        learning_rate: 5.0,
        total_updates,
        eval_interval,
        seed,
        max_sim_seconds,
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn unbiasedness() -> Verdict {
    let t = Instant::now();
    let dev = unbiasedness_max_deviation(200, 2, 4, 4, &mut RngStream::new(0)).expect("enumeration");
    let el = t.elapsed();
    (
        dev <= 1e-10 && within(el, 60),
        format!("max deviation {dev:.2e} over 200 instances in {el:.2?}"),
    )
}

fn screened_gradient_identity() -> Verdict {
    let t = Instant::now();
    let dev = screened_identity(100, 3, &mut RngStream::new(0)).expect("enumeration");
    let el = t.elapsed();
    (
        dev.identity <= 1e-8 && dev.finite_difference <= 1e-5 && within(el, 120),
        format!(
            "identity {:.2e}, finite difference {:.2e} over {} instances in {el:.2?}",
            dev.identity, dev.finite_difference, dev.instances
        ),
    )
}

fn reweighting_monotone() -> Verdict {
    let (min, k, c, p) = phi_min_derivative(1001, 8, 23);
    (
        min >= -1e-12,
        format!("min derivative {min:.2e} at n_init={k} n_cont={c} p={p}"),
    )
}

fn snr_vanishes_at_extremes() -> Verdict {
    let paths = snr_limit_paths(20, 4, &mut RngStream::new(0)).expect("paths");
    let failing = paths.iter().filter(|p| !p.vanishes(1e-3)).count();
    let worst = paths
        .iter()
        .map(|p| p.low_end.max(p.high_end) / p.peak)
        .fold(0.0, f64::max);
    (
        failing == 0,
        format!("{failing} of 20 paths fail; worst end/peak ratio {worst:.2e}"),
    )
}

fn bound_chain_holds() -> Verdict {
    let report = bound_chain(&[3, 4], &[2, 3, 4], 1e-9).expect("bounds");
    for d in &report.discrepancies {
        println!("    discrepancy: {d:?}");
    }
    (
        report.discrepancies.is_empty(),
        format!(
            "{} grid points, {} violations",
            report.points.len(),
            report.discrepancies.len()
        ),
    )
}

fn one_step_improvement() -> Verdict {
    let t = Instant::now();
    let reports = one_step_suite(100_000, 0).expect("harness");
    let el = t.elapsed();
    let ok = reports.iter().all(|r| r.bound_holds(4.0) && r.matches_closed_form(2.0));
    let detail = reports
        .iter()
        .map(|r| {
            format!(
                "snr {}: {:.4}±{:.4} vs bound {:.4}, closed form {:.4}",
                r.snr, r.empirical_improvement, r.stderr, r.bound_rhs, r.closed_form
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    (ok && within(el, 60), format!("{detail} ({el:.2?})"))
}

fn scheduler_contracts() -> Verdict {
    let cfg = GoldenRunConfig::default();
    let a = golden_run(&cfg).expect("run");
    let b = golden_run(&cfg).expect("run");
    let (ja, jb) = (to_jsonl(&a.trace), to_jsonl(&b.trace));
    let failed: Vec<String> = audit_loop(&a, &cfg.curriculum)
        .into_iter()
        .filter(|c| !c.ok)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let digest_ok = digest_hex(ja.as_bytes()) == GOLDEN_TRACE_DIGEST;
    (
        failed.is_empty() && ja == jb && digest_ok && a.trace.len() == 500,
        format!(
            "{} iterations, {} updates, identical reruns {}, golden digest {}, failed contracts {:?}",
            a.trace.len(),
            a.trained.len(),
            ja == jb,
            digest_ok,
            failed
        ),
    )
}

fn simulated_speedup() -> Verdict {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let s = start(seed);
        let cfg = train(seed, u64::MAX, 1, Some(60_000.0));
        let (mut e, mut l) = engine(&s);
        let base = train_baseline(
            &mut e,
            &mut l,
            &BaselineConfig::default(),
            &cfg,
            &mut RngStream::new(seed),
        )
        .expect("baseline");
        let (mut e, mut l) = engine(&s);
        let speed = train_speed(
            &mut e,
            &mut l,
            &CurriculumConfig::default(),
            &cfg,
            &mut RngStream::new(seed),
        )
        .expect("speed");
        for target in [0.5, 0.7] {
            let ratio = match (time_to_target(&base, target), time_to_target(&speed.trace, target)) {
                (Some(b), Some(s)) => b / s,
                _ => f64::NAN,
            };
            ok &= ratio >= 1.5;
            parts.push(format!("seed {seed} @{target}: {ratio:.2}x"));
        }
    }
    let el = t.elapsed();
    (ok && within(el, 600), format!("{} ({el:.2?})", parts.join(", ")))
}

fn informative_batches() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let s = start(seed);
        let cfg = train(seed, 200, 1, None);
        let (mut e, mut l) = engine(&s);
        let base = train_baseline(
            &mut e,
            &mut l,
            &BaselineConfig::default(),
            &cfg,
            &mut RngStream::new(seed),
        )
        .expect("baseline");
        let (mut e, mut l) = engine(&s);
        let speed = train_speed(
            &mut e,
            &mut l,
            &CurriculumConfig::default(),
            &cfg,
            &mut RngStream::new(seed),
        )
        .expect("speed");
        let b = trace_stats(&base, 0.5).expect("stats");
        let sp = trace_stats(&speed.trace, 0.5).expect("stats");
        ok &= sp.mean_pass_rate_distance < b.mean_pass_rate_distance && sp.mean_grad_norm > b.mean_grad_norm;
        parts.push(format!(
            "seed {seed}: distance {:.3} vs {:.3}, grad norm {:.4} vs {:.4}",
            sp.mean_pass_rate_distance, b.mean_pass_rate_distance, sp.mean_grad_norm, b.mean_grad_norm
        ));
    }
    (ok, format!("screened vs baseline: {}", parts.join("; ")))
}

fn screening_size_sweep() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let s = start(seed);
        let report = ninit_sweep(
            &CurriculumConfig::default(),
            &train(seed, 300, 10, None),
            &[4, 6, 8],
            || Ok(engine(&s)),
        )
        .expect("sweep");
        ok &= report.is_monotone();
        let points = report
            .points
            .iter()
            .map(|p| {
                format!(
                    "{}:{:.3}/{:.4}",
                    p.n_init, p.mean_selected_distance, p.stats.mean_grad_norm
                )
            })
            .collect::<Vec<_>>()
            .join(" ");
        parts.push(format!("seed {seed} [{points}]"));
    }
    (ok, format!("n_init:distance/grad_norm {}", parts.join(", ")))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("unbiased RLOO estimator", unbiasedness),
        ("screened gradient identity", screened_gradient_identity),
        ("reweighting monotone", reweighting_monotone),
        ("SNR vanishes at extremes", snr_vanishes_at_extremes),
        ("SNR bound chain", bound_chain_holds),
        ("one-step improvement bound", one_step_improvement),
        ("scheduler contracts", scheduler_contracts),
        ("simulated speedup", simulated_speedup),
        ("informative batches", informative_batches),
        ("screening size sweep", screening_size_sweep),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (ok, detail) = run();
        failures += usize::from(!ok);
        println!(
            "criterion {:>2} {name}: {} ({detail})",
            i + 1,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
