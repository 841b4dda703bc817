mod common;

use multiesn::analysis::{correlation_matrix, pearson, summarize_values};
use multiesn::bptt::{chunk_starts, clip_global_norm, global_norm, make_batches};
use multiesn::readout::ridge_fit;
use multiesn::tasks::{delay_target, gen_input, narma10, narma_tail_target, nmse, product_target, Dataset};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decomposition_reproduces_narma(seed in any::<u64>(), len in 20usize..2000) {
        let u = gen_input(len, seed);
        let y = narma10(&u).unwrap();
        let y1 = delay_target(&u);
        let y3 = narma_tail_target(&product_target(&u, &y1).unwrap()).unwrap();
        for (a, b) in y3.iter().zip(y.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn nmse_nonnegative_and_zero_on_target(seed in any::<u64>(), noise in 0.0f64..1.0) {
        let d = Dataset::generate(600, seed, 3).unwrap();
        let pert: Vec<f64> = d.y.iter().zip(gen_input(600, seed ^ 1).iter()).map(|(y, n)| y + noise * n).collect();
        prop_assert!(nmse(&pert, &d.y, 100).unwrap() >= 0.0);
        prop_assert_eq!(nmse(&d.y, &d.y, 100).unwrap(), 0.0);
    }

    #[test]
    fn ridge_shrinks_monotonically(seed in 0u64..1000) {
        let (rows, y) = common::ridge_instance(300, 8, seed);
        let norms: Vec<f64> = [1e-6, 1e-3, 1e-1, 1e1, 1e3]
            .iter()
            .map(|&l| ridge_fit(&rows, 8, &y, l).unwrap().norm())
            .collect();
        for w in norms.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn pearson_is_symmetric_and_bounded(sa in any::<u64>(), sb in any::<u64>()) {
        let a = gen_input(300, sa);
        let b: Vec<f64> = gen_input(300, sb).iter().zip(a.iter()).map(|(x, y)| x + 0.5 * y).collect();
        let r = pearson(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert_eq!(r, pearson(&b, &a).unwrap());
        prop_assert!((r - common::naive_pearson(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn correlation_matrix_matches_pairwise(seeds in prop::collection::vec(any::<u64>(), 2..6), washout in 0usize..50) {
        let series: Vec<Vec<f64>> = seeds.iter().map(|s| gen_input(200, *s).values).collect();
        let named: Vec<(String, &[f64])> = series.iter().enumerate().map(|(i, s)| (format!("s{i}"), &s[..])).collect();
        let m = correlation_matrix(&named, washout).unwrap();
        for i in 0..m.dim() {
            prop_assert_eq!(m.get(i, i), 1.0);
            for j in 0..m.dim() {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                let naive = common::naive_pearson(&series[i][washout..], &series[j][washout..]);
                prop_assert!((m.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn summary_is_permutation_invariant(vals in prop::collection::vec(0.0f64..1.0, 1..12), rot in 0usize..12) {
        let pairs: Vec<(usize, f64)> = vals.iter().copied().enumerate().collect();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let a = summarize_values(&pairs).unwrap();
        let b = summarize_values(&rotated).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
        prop_assert!((a.std - b.std).abs() < 1e-12);
        prop_assert_eq!(a.best_run, b.best_run);
        prop_assert!(pairs.iter().all(|(_, v)| a.best_nmse <= *v));
    }

    #[test]
    fn clipping_bounds_norm(g in prop::collection::vec(-10.0f64..10.0, 1..50), clip in 0.1f64..5.0) {
        let mut c = g.clone();
        clip_global_norm(&mut c, clip);
        prop_assert!(global_norm(&c) <= clip * (1.0 + 1e-12));
        if global_norm(&g) <= clip {
            prop_assert_eq!(c, g);
        }
    }

    #[test]
    fn batches_partition_chunks(len in 100usize..5000, chunk in 10usize..200, batch in 1usize..100, seed in any::<u64>()) {
        let starts = chunk_starts(len, chunk);
        prop_assert!(starts.windows(2).all(|w| w[1] - w[0] == chunk));
        prop_assert!(starts.last().is_none_or(|s| s + chunk <= len));
        let batches = make_batches(starts.len(), batch, seed);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..starts.len()).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() <= batch));
        prop_assert_eq!(batches, make_batches(starts.len(), batch, seed));
    }
}
