//! Randomized invariants of the metrics, windowing and attention primitives.

use attend_affect::metrics::{ccc, ewe, human_benchmark, pearson, top_changes, EweOptions};
use attend_affect::tensor::{Graph, Tensor};
use attend_affect::transformer::attention_single_head;
use attend_affect::windowing::{oversample_index, window_count};
use proptest::prelude::*;

fn series(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| (series(n..n + 1), series(n..n + 1)))
}

proptest! {
    #[test]
    fn ccc_is_symmetric_and_bounded((x, y) in pair()) {
        let a = ccc(&x, &y).unwrap();
        let b = ccc(&y, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn ccc_never_exceeds_pearson_in_magnitude((x, y) in pair()) {
        let c = ccc(&x, &y).unwrap();
        let r = pearson(&x, &y).unwrap();
        prop_assert!(c.abs() <= r.abs() + 1e-12);
    }

    #[test]
    fn ccc_drops_under_a_shift(x in series(3..40), shift in 0.1f64..2.0) {
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
        let y: Vec<f64> = x.iter().map(|v| v + shift).collect();
        prop_assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ccc(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn ewe_weights_reproduce_values(obs in (1usize..6, 2usize..30)
        .prop_flat_map(|(k, n)| prop::collection::vec(series(n..n + 1), k))) {
        let refs: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
        let e = ewe(&refs, EweOptions::default()).unwrap();
        prop_assert_eq!(e.weights.len(), obs.len());
        let total: f64 = e.weights.iter().sum();
        if !e.fallback && total.abs() > 1e-6 {
            for t in 0..obs[0].len() {
                let direct = obs.iter().zip(&e.weights).map(|(r, w)| w * r[t]).sum::<f64>() / total;
                prop_assert!((direct - e.values[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn top_changes_are_sorted_by_magnitude(x in series(2..50), k in 1usize..10) {
        let top = top_changes(&x, k).unwrap();
        prop_assert_eq!(top.len(), k.min(x.len() - 1));
        for w in top.windows(2) {
            prop_assert!(w[0].1.abs() >= w[1].1.abs());
        }
        for (i, d) in &top {
            prop_assert!(*i >= 1);
            prop_assert_eq!(*d, x[*i] - x[*i - 1]);
        }
    }

    #[test]
    fn oversampled_index_repeats_each_source(n in 1usize..60, ratio in 1usize..8) {
        let idx = oversample_index(n, ratio);
        prop_assert_eq!(idx.len(), n);
        for (i, &s) in idx.iter().enumerate() {
            prop_assert_eq!(s, i / ratio);
        }
    }

    #[test]
    fn window_count_covers_whole_seconds(secs in 1u32..600, frac in 0.0f64..0.99) {
        prop_assert_eq!(window_count(secs as f64 + frac, 1.0), secs as usize);
        prop_assert_eq!(window_count(secs as f64, 5.0), secs as usize / 5);
    }

    #[test]
    fn attention_rows_are_distributions(
        n in 1usize..6,
        vals in prop::collection::vec(-3.0f64..3.0, 6 * 4 + 3 * 4 * 3),
        causal in any::<bool>(),
    ) {
        let (d, dk) = (4, 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n, d], vals[..n * d].to_vec()).unwrap());
        let w = |g: &mut Graph<'_>, i: usize| {
            let off = 24 + i * d * dk;
            g.constant(Tensor::new(vec![d, dk], vals[off..off + d * dk].to_vec()).unwrap())
        };
        let (wq, wk, wv) = (w(&mut g, 0), w(&mut g, 1), w(&mut g, 2));
        let (_, a) = attention_single_head(&mut g, x, wq, wk, wv, causal).unwrap();
        let a = g.value(a);
        for i in 0..n {
            let row = a.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            if causal {
                prop_assert!(row[i + 1..].iter().all(|p| *p < 1e-300));
            }
        }
    }
}

#[test]
fn human_benchmark_approaches_one_for_near_identical_observers() {
    let mut rng = attend_affect::tensor::RngState::new(12);
    let truth: Vec<f64> = (0..200).map(|t| (t as f64 / 15.0).sin() * 0.8).collect();
    let obs: Vec<Vec<f64>> = (0..6)
        .map(|_| truth.iter().map(|v| v + rng.normal(0.0, 1e-4)).collect())
        .collect();
    let refs: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
    assert!(human_benchmark(&refs, EweOptions::default()).unwrap() >= 0.99);
}

#[test]
fn human_benchmark_needs_two_observers() {
    let r = vec![0.1, 0.2, 0.3];
    assert!(human_benchmark(&[&r], EweOptions::default()).is_err());
}
