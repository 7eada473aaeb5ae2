use proptest::prelude::*;
use uasml_core::ensemble::{split_blocks, split_counts};
use uasml_core::excitation::lhs_sample;
use uasml_core::narx::Scaler;
use uasml_core::rng::stream;
use uasml_core::stats::quantile;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lhs_puts_one_point_in_every_stratum(n in 1usize..60, d in 1usize..6, seed in any::<u64>()) {
        let bounds: Vec<(f64, f64)> = (0..d).map(|j| (j as f64, 2.0 * j as f64 + 1.0)).collect();
        let design = lhs_sample(n, &bounds, &mut stream(seed, "lhs", 0)).unwrap();
        prop_assert_eq!(design.n_steps(), n);
        for j in 0..d {
            prop_assert!(design.stratum_counts(j).iter().all(|&c| c == 1));
            for v in design.column(j) {
                prop_assert!(v >= bounds[j].0 && v <= bounds[j].1);
            }
        }
    }

    #[test]
    fn block_split_is_a_partition(n in 3usize..200, seed in any::<u64>()) {
        let fractions = [0.7, 0.15, 0.15];
        let split = split_blocks(n, fractions, &mut stream(seed, "split", 0)).unwrap();
        let counts = split_counts(n, fractions).unwrap();
        prop_assert_eq!([split.train.len(), split.validation.len(), split.test.len()], counts);
        let mut all: Vec<usize> = split.train.iter().chain(&split.validation).chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn scaler_round_trips_and_maps_the_range(values in prop::collection::vec(-1e6f64..1e6, 2..50)) {
        let sc = Scaler::fit(values.iter().copied()).unwrap();
        prop_assume!(sc.max > sc.min);
        for v in &values {
            let s = sc.scale(*v);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
            prop_assert!((sc.unscale(s) - v).abs() <= 1e-9 * (sc.max - sc.min));
        }
    }

    #[test]
    fn quantiles_are_monotone_and_bounded(values in prop::collection::vec(-1e3f64..1e3, 1..80), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = quantile(&values, lo);
        let b = quantile(&values, hi);
        prop_assert!(a <= b);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= min && b <= max);
    }
}
