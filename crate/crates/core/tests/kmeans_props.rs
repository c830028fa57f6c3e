mod common;

use common::best_two_partition;
use csmil::kmeans::{kmeans_best_of, kmeans_fit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn best_of_five_finds_the_exhaustive_optimum() {
    let mut hits = 0;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let pts: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = kmeans_best_of(&pts, 2, 2, 0..5, 100, 0.0).unwrap();
        if (m.inertia - best_two_partition(&pts)).abs() <= 1e-9 {
            hits += 1;
        }
    }
    assert!(hits >= 18, "{hits}/20 instances at the optimum");
}

fn points() -> impl Strategy<Value = (Vec<f64>, usize, usize)> {
    (1usize..4, 1usize..40).prop_flat_map(|(dim, n)| {
        (
            prop::collection::vec(prop_oneof![-5.0f64..5.0, (0i8..3).prop_map(f64::from)], n * dim),
            Just(dim),
            1..=n.min(8),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lloyd_invariants((pts, dim, k) in points(), seed in 0u64..1000) {
        let m = kmeans_fit(&pts, dim, k, seed, 100, 1e-9).unwrap();
        for w in m.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{:?}", m.inertia_trace);
        }
        let mut counts = vec![0usize; k];
        for &a in &m.assignments {
            counts[a] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c > 0), "{:?}", counts);
        let again = kmeans_fit(&pts, dim, k, seed, 100, 1e-9).unwrap();
        prop_assert_eq!(m, again);
    }
}
