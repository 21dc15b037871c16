use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use widenet::replay::{PrioritizedBuffer, ReplayMode, SumTree, Transition};

fn t(i: usize) -> Transition {
    Transition {
        s: vec![i as f64],
        a: vec![0.0],
        r: i as f64,
        s_next: vec![i as f64 + 1.0],
        done: false,
        version: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sum_tree_root_tracks_naive_sum(cap in 1usize..64, ops in proptest::collection::vec((0usize..64, 0.0f64..10.0), 1..300)) {
        let mut tree = SumTree::new(cap);
        let mut naive = vec![0.0; cap];
        for (i, v) in ops {
            let i = i % cap;
            tree.set(i, v);
            naive[i] = v;
        }
        let total: f64 = naive.iter().sum();
        prop_assert!((tree.total() - total).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn weights_are_normalised_and_slots_live(
        cap in 2usize..40,
        adds in 1usize..80,
        tds in proptest::collection::vec(0.0f64..5.0, 1..40),
        alpha in 0.0f64..1.0,
        beta in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = PrioritizedBuffer::new(cap, alpha, 1e-6, ReplayMode::Prioritized).unwrap();
        for i in 0..adds {
            buf.add(t(i), None).unwrap();
        }
        let n = tds.len().min(buf.len());
        let sb = buf.sample(n, beta, &mut rng).unwrap();
        buf.update_priorities(&sb.indices, &tds[..n]).unwrap();
        let sb = buf.sample(n, beta, &mut rng).unwrap();
        let max = sb.is_weights.iter().cloned().fold(0.0, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-12);
        prop_assert!(sb.is_weights.iter().all(|&w| w > 0.0 && w <= 1.0 + 1e-12));
        for idx in &sb.indices {
            prop_assert!(buf.transition(idx.slot).is_some());
        }
        prop_assert!((buf.total() - buf.naive_total()).abs() <= 1e-9 * buf.naive_total().max(1.0));
    }

    #[test]
    fn uniform_mode_ignores_priorities(seed in any::<u64>(), tds in proptest::collection::vec(0.0f64..100.0, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = PrioritizedBuffer::new(8, 0.6, 1e-6, ReplayMode::Uniform).unwrap();
        for i in 0..8 {
            buf.add(t(i), None).unwrap();
        }
        let sb = buf.sample(4, 0.4, &mut rng).unwrap();
        buf.update_priorities(&sb.indices, &tds).unwrap();
        for s in 0..8 {
            prop_assert!((buf.probability(s) - 0.125).abs() < 1e-15);
        }
        let sb = buf.sample(4, 0.4, &mut rng).unwrap();
        prop_assert!(sb.is_weights.iter().all(|&w| w == 1.0));
    }
}

#[test]
fn overwritten_slots_ignore_late_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut buf = PrioritizedBuffer::new(2, 1.0, 1e-6, ReplayMode::Prioritized).unwrap();
    buf.add(t(0), None).unwrap();
    buf.add(t(1), None).unwrap();
    let sb = buf.sample(2, 1.0, &mut rng).unwrap();
    buf.add(t(2), None).unwrap();
    buf.add(t(3), None).unwrap();
    let before = buf.total();
    buf.update_priorities(&sb.indices, &[100.0, 100.0]).unwrap();
    assert_eq!(buf.total(), before);
    assert_eq!(buf.stale_updates(), 2);
}

#[test]
fn priority_frequencies_follow_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut buf = PrioritizedBuffer::new(3, 0.5, 1e-6, ReplayMode::Prioritized).unwrap();
    for i in 0..3 {
        buf.add(t(i), Some([1.0, 4.0, 9.0][i])).unwrap();
    }
    // p^0.5 = 1, 2, 3 → 1/6, 2/6, 3/6
    let mut counts = [0usize; 3];
    let n = 60_000;
    for _ in 0..n {
        counts[buf.sample_indices(1, &mut rng).unwrap()[0]] += 1;
    }
    for (c, want) in counts.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((*c as f64 / n as f64 - want).abs() < 0.01);
    }
    let _ = rng.gen::<f64>();
}
