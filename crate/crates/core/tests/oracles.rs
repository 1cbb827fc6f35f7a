//! Library results against independent brute-force computations.

use proptest::prelude::*;
use spurscope::clustering::embed_2d;
use spurscope::data::{Label, Split, TimeSeries};
use spurscope::metrics::relevance_accuracy;
use spurscope::similarity::{dtw_distance, DistanceKind, DistanceMatrix};
use spurscope::spuriousness::{propagate, Adjacency, AnnotationState, Verdict};

fn series(values: Vec<Vec<f64>>) -> TimeSeries {
    TimeSeries {
        id: "s".into(),
        label: Label::Normal,
        split: Split::Train,
        values,
        truth_mask: None,
    }
}

/// Minimum cost over every monotone warping path, enumerated explicitly.
fn dtw_by_paths(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a[0].len(), b[0].len());
    let cost = |i: usize, j: usize| -> f64 {
        a.iter().zip(b).map(|(ra, rb)| (ra[i] - rb[j]).powi(2)).sum::<f64>().sqrt()
    };
    fn walk(i: usize, j: usize, n: usize, m: usize, acc: f64, cost: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        let acc = acc + cost(i, j);
        if i + 1 == n && j + 1 == m {
            *best = best.min(acc);
            return;
        }
        if i + 1 < n {
            walk(i + 1, j, n, m, acc, cost, best);
        }
        if j + 1 < m {
            walk(i, j + 1, n, m, acc, cost, best);
        }
        if i + 1 < n && j + 1 < m {
            walk(i + 1, j + 1, n, m, acc, cost, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(0, 0, n, m, 0.0, &cost, &mut best);
    best
}

fn ra_by_sort(mask: &[f64], truth: &[bool], m: f64) -> f64 {
    let g = truth.iter().filter(|&&b| b).count();
    let k = (((100.0 + m) * g as f64 / 100.0).floor() as usize).min(mask.len());
    let mut idx: Vec<usize> = (0..mask.len()).collect();
    idx.sort_by(|&a, &b| mask[b].partial_cmp(&mask[a]).unwrap().then(a.cmp(&b)));
    idx[..k].iter().filter(|&&t| truth[t]).count() as f64 / g as f64
}

fn pairwise(points: &[[f64; 2]]) -> DistanceMatrix {
    let n = points.len();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            entries[i * n + j] = ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
        }
    }
    DistanceMatrix {
        ids: (0..n).map(|i| format!("p{i}")).collect(),
        kind: DistanceKind::Dtw,
        alpha: None,
        entries,
    }
}

fn seq(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=7).prop_flat_map(move |n| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dtw_equals_best_warping_path(a in seq(1), b in seq(1)) {
        let got = dtw_distance(&series(a.clone()), &series(b.clone())).unwrap();
        prop_assert_eq!(got, dtw_by_paths(&a, &b));
    }

    #[test]
    fn multichannel_dtw_equals_best_warping_path(a in seq(2), b in seq(2)) {
        let got = dtw_distance(&series(a.clone()), &series(b.clone())).unwrap();
        prop_assert!((got - dtw_by_paths(&a, &b)).abs() <= 1e-12 * got.max(1.0));
    }

    #[test]
    fn relevance_accuracy_equals_full_sort(
        mask in prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.5)], 1..60),
        seed_bits in any::<u64>(),
        m in prop_oneof![Just(20.0), Just(25.0), Just(30.0), Just(35.0), 0.0f64..100.0],
    ) {
        let truth: Vec<bool> = (0..mask.len()).map(|t| (seed_bits >> (t % 64)) & 1 == 1).collect();
        prop_assume!(truth.iter().any(|&b| b));
        let m = m.floor();
        prop_assert_eq!(relevance_accuracy(&mask, &truth, m).unwrap(), ra_by_sort(&mask, &truth, m));
    }

    #[test]
    fn mds_recovers_planar_distances(points in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50)) {
        let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
        let dm = pairwise(&points);
        let e = embed_2d(&dm).unwrap();
        let back = pairwise(&e.points);
        for (a, b) in dm.entries.iter().zip(&back.entries) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn dtw_hand_example_is_zero() {
    let a = series(vec![vec![1.0, 2.0, 3.0]]);
    let b = series(vec![vec![1.0, 2.0, 2.0, 3.0]]);
    assert_eq!(dtw_distance(&a, &b).unwrap(), 0.0);
}

#[test]
fn path_graph_middle_is_half() {
    let adj = Adjacency {
        k: 3,
        sigma: 1.0,
        weights: vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
    };
    let mut ann = AnnotationState::default();
    ann.label_cluster(0, Verdict::Correct);
    ann.label_cluster(2, Verdict::Spurious);
    let s = propagate(&ann, &adj).unwrap();
    assert_eq!(s.scores[0], 0.0);
    assert_eq!(s.scores[2], 1.0);
    assert!((s.scores[1] - 0.5).abs() < 1e-6);
    assert!(s.converged);
}
