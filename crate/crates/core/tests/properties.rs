mod common;

use common::*;
use dvorl_core::buffer::{self, ActionSpec, ReplayBuffer, Transition};
use dvorl_core::divergence::kl_knn;
use dvorl_core::dve::{excluded_indices, filter_buffer, RemovalSide, RollingBaseline, ValuedBuffer};
use ndarray::Array2;
use proptest::prelude::*;

fn transition(dim: usize) -> impl Strategy<Value = Transition> {
    (
        prop::collection::vec(-1e6..1e6f64, dim),
        0u32..5,
        prop::collection::vec(-1e6..1e6f64, dim),
        prop::num::f64::NORMAL | prop::num::f64::ZERO,
        any::<bool>(),
    )
        .prop_map(|(s, a, ns, r, t)| Transition::discrete(s, a, ns, r, t))
}

fn buffer() -> impl Strategy<Value = ReplayBuffer> {
    (1usize..5)
        .prop_flat_map(|dim| (Just(dim), prop::collection::vec(transition(dim), 0..60), "[a-z0-9|=.]{0,20}"))
        .prop_map(|(dim, ts, tag)| ReplayBuffer::with_transitions(dim, ActionSpec::Discrete { n_actions: 5 }, tag, ts))
}

fn valued() -> impl Strategy<Value = (ReplayBuffer, Vec<f64>)> {
    buffer().prop_flat_map(|b| {
        let n = b.len();
        (Just(b), prop::collection::vec(prop_oneof![0.0..1.0f64, Just(0.0), Just(0.5), Just(1.0)], n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn binary_round_trip(b in buffer()) {
        let mut bytes = Vec::new();
        buffer::write_to(&b, &mut bytes).unwrap();
        let back = buffer::read_from(&bytes).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn batches_partition_the_buffer(b in buffer(), size in 1usize..17) {
        let batches: Vec<&[Transition]> = b.split_batches(size).collect();
        prop_assert_eq!(batches.len(), b.len().div_ceil(size));
        prop_assert!(batches.iter().all(|c| c.len() <= size && !c.is_empty()));
        let joined: Vec<Transition> = batches.concat();
        prop_assert_eq!(joined, b.transitions);
    }

    #[test]
    fn filter_matches_scan_and_is_monotone((b, values) in valued(), e1 in 0.0..=1.0f64, e2 in 0.0..=1.0f64) {
        let vb = ValuedBuffer { buffer: &b, values: values.clone() };
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let low = filter_buffer(&vb, lo);
        let high = filter_buffer(&vb, hi);
        let expected: Vec<Transition> = kept_indices_oracle(&values, lo).into_iter().map(|i| b.transitions[i].clone()).collect();
        prop_assert_eq!(&low.transitions, &expected);
        prop_assert_eq!(filter_buffer(&vb, 0.0).len(), b.len());
        prop_assert_eq!(filter_buffer(&vb, 1.0).len(), values.iter().filter(|&&w| w == 1.0).count());
        let kept_high = kept_indices_oracle(&values, hi);
        let kept_low = kept_indices_oracle(&values, lo);
        prop_assert!(kept_high.iter().all(|i| kept_low.contains(i)));
        prop_assert_eq!(high.len(), kept_high.len());
    }

    #[test]
    fn baseline_matches_recursion(rewards in prop::collection::vec(0.0..1000.0f64, 1..100), window in 1usize..40) {
        let mut b = RollingBaseline::new(window);
        let got: Vec<(f64, f64)> = rewards.iter().map(|&r| (b.observe(r), b.value())).collect();
        prop_assert_eq!(got, baseline_oracle(&rewards, window));
    }

    #[test]
    fn exclusion_removes_the_extremes(values in prop::collection::vec(0.0..1.0f64, 0..80), fraction in 0.0..=1.0f64) {
        let n = values.len();
        for side in [RemovalSide::Highest, RemovalSide::Lowest] {
            let removed = excluded_indices(&values, fraction, side);
            prop_assert_eq!(removed.len(), (fraction * n as f64).floor() as usize);
            let kept: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
            for &r in &removed {
                for &k in &kept {
                    match side {
                        RemovalSide::Highest => prop_assert!(values[r] >= values[k]),
                        RemovalSide::Lowest => prop_assert!(values[r] <= values[k]),
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn knn_kl_is_translation_invariant(seed in 0u64..1000, shift in -50.0..50.0f64) {
        let p = normal_samples(200, &[0.0, 0.0, 0.0], seed);
        let q = normal_samples(200, &[1.0, 0.0, -0.5], seed + 1);
        let moved = |x: &Array2<f64>| x.mapv(|v| v + shift);
        let a = kl_knn(p.view(), q.view(), 5).unwrap();
        let b = kl_knn(moved(&p).view(), moved(&q).view(), 5).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
}
