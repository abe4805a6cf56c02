//! Property tests for estimator, reweighting, clock and scheduler invariants.

use proptest::prelude::*;
use speedlab::estimators::{phi, phi_prime, rloo_advantages, CurriculumShape, RewardVector};
use speedlab::policy::{softmax, Sample, TaskId};
use speedlab::rng::RngStream;
use speedlab::scheduler::{screen, CurriculumConfig, Decision, EpochLoader, ScreeningResult, TaskLoader};
use speedlab::sim::{Generation, LatencyModel};

fn generations(rewards: &[bool]) -> Vec<Generation> {
    rewards
        .iter()
        .map(|&reward| Generation {
            sample: Sample { response: None, reward },
            score: None,
        })
        .collect()
}

proptest! {
    #[test]
    fn advantages_sum_to_zero(bits in prop::collection::vec(any::<bool>(), 2..32)) {
        let adv = rloo_advantages(&RewardVector::new(bits.clone()).unwrap()).unwrap();
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-12);
        if bits.iter().all(|&b| b == bits[0]) {
            prop_assert!(adv.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn reweighting_is_nondecreasing(k in 1usize..=8, c in 1usize..=23, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let shape = CurriculumShape::new(k, c).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(phi_prime(lo, shape) >= -1e-12);
        prop_assert!(phi(hi, shape) - phi(lo, shape) >= -1e-12);
        prop_assert!((phi_prime(lo, shape) - phi_prime(1.0 - lo, shape)).abs() < 1e-12);
    }

    #[test]
    fn reweighting_derivative_matches_difference_quotient(k in 1usize..=6, c in 1usize..=10, p in 0.01f64..0.99) {
        let shape = CurriculumShape::new(k, c).unwrap();
        let h = 1e-6;
        let fd = (phi(p + h, shape) - phi(p - h, shape)) / (2.0 * h);
        prop_assert!((fd - phi_prime(p, shape)).abs() < 1e-7);
    }

    #[test]
    fn call_time_is_monotone(a in 0usize..2000, extra in 0usize..500, width in 1usize..128) {
        let model = LatencyModel { concurrency_width: width, ..LatencyModel::default() };
        prop_assert!(model.call_time(a + extra) >= model.call_time(a));
        prop_assert!(model.call_time(a) >= model.call_overhead);
    }

    #[test]
    fn screening_is_strict(bits in prop::collection::vec(any::<bool>(), 1..9)) {
        let result = ScreeningResult::from_generations(TaskId(0), generations(&bits)).unwrap();
        let mixed = bits.iter().any(|&b| b) && bits.iter().any(|&b| !b);
        let decision = screen(&result, &CurriculumConfig::default());
        prop_assert_eq!(decision == Decision::Accept, mixed);
    }

    #[test]
    fn loader_epochs_are_permutations(n in 1usize..40, seed in any::<u64>()) {
        let ids: Vec<TaskId> = (0..n as u64).map(TaskId).collect();
        let mut loader = EpochLoader::new(ids.clone()).unwrap();
        let mut rng = RngStream::new(seed);
        for _ in 0..3 {
            let mut epoch = loader.next_batch(n, &mut rng);
            epoch.sort();
            prop_assert_eq!(&epoch, &ids);
        }
        prop_assert_eq!(loader.epoch(), 3);
    }
}
