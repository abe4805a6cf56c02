//! End-to-end scheduler contracts on seeded runs.

use speedlab::metrics::{to_jsonl, IterationKind};
use speedlab::rng::RngStream;
use speedlab::scheduler::{BufferPolicy, CurriculumConfig, EpochLoader};
use speedlab::sim::{make_population, InferenceEngine, LatencyModel, LatentEngine, PopulationSpec};
use speedlab::trainer::{train_speed, TrainConfig};
use speedlab::verify::{audit_loop, digest_hex, golden_run, GoldenRunConfig, GOLDEN_TRACE_DIGEST};

#[test]
fn golden_trace_is_stable() {
    let a = golden_run(&GoldenRunConfig::default()).unwrap();
    let b = golden_run(&GoldenRunConfig::default()).unwrap();
    let (ja, jb) = (to_jsonl(&a.trace), to_jsonl(&b.trace));
    assert_eq!(ja, jb);
    assert_eq!(digest_hex(ja.as_bytes()), GOLDEN_TRACE_DIGEST);
    assert_eq!(a.trace.len(), 500);
}

#[test]
fn golden_run_meets_every_contract() {
    let cfg = GoldenRunConfig::default();
    let out = golden_run(&cfg).unwrap();
    for check in audit_loop(&out, &cfg.curriculum) {
        assert!(check.ok, "{}: {}", check.name, check.detail);
    }
}

fn latent_run(buffer_policy: BufferPolicy, seed: u64) -> (speedlab::scheduler::LoopOutcome, CurriculumConfig) {
    let spec = PopulationSpec {
        size: 120,
        zero_mass: 0.3,
        one_mass: 0.2,
        alpha: 2.0,
        beta: 2.0,
        extreme_gap: 0.0,
    };
    let tasks = make_population(&spec, &mut RngStream::with_stream(seed, 1)).unwrap();
    let mut engine = LatentEngine::new(tasks, LatencyModel::default()).unwrap();
    let mut loader = EpochLoader::new(engine.task_ids()).unwrap();
    let curriculum = CurriculumConfig {
        buffer_policy,
        ..CurriculumConfig::default()
    };
    let train = TrainConfig {
        total_updates: 60,
        seed,
        ..TrainConfig::default()
    };
    let out = train_speed(&mut engine, &mut loader, &curriculum, &train, &mut RngStream::new(seed)).unwrap();
    (out, curriculum)
}

#[test]
fn latent_runs_meet_contracts_under_both_buffer_policies() {
    for policy in [BufferPolicy::Fifo, BufferPolicy::UniformRandom] {
        for seed in 0..3 {
            let (out, cfg) = latent_run(policy, seed);
            assert_eq!(out.trained.len(), 60);
            for check in audit_loop(&out, &cfg) {
                assert!(check.ok, "{policy:?} seed {seed}: {}: {}", check.name, check.detail);
            }
            // Latent engines have nothing to differentiate.
            assert!(out
                .trace
                .iter()
                .filter(|r| r.kind == IterationKind::Update)
                .all(|r| r.grad_norm.is_none()));
        }
    }
}

#[test]
fn counters_balance() {
    let (out, _) = latent_run(BufferPolicy::Fifo, 4);
    let c = out.state.counters;
    assert_eq!(c.prompts_screened, c.prompts_accepted + c.prompts_rejected);
    assert_eq!(c.updates, 60);
    let inference = out.trace.iter().filter(|r| r.kind == IterationKind::Inference).count() as u64;
    assert_eq!(inference, c.engine_calls);
}

#[test]
fn trained_prompts_had_mixed_screens() {
    let (out, cfg) = latent_run(BufferPolicy::UniformRandom, 5);
    for entry in out.trained.iter().flatten() {
        assert!(entry.screening_estimate > cfg.p_low && entry.screening_estimate < cfg.p_high);
        assert_eq!(entry.samples, cfg.shape.n_total());
        assert!(entry.completed_call > entry.screened_call);
    }
}

#[test]
fn different_seeds_diverge() {
    let (a, _) = latent_run(BufferPolicy::Fifo, 0);
    let (b, _) = latent_run(BufferPolicy::Fifo, 1);
    assert_ne!(to_jsonl(&a.trace), to_jsonl(&b.trace));
}
