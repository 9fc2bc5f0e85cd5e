mod common;

use common::*;
use couple_core::dataset::Domain;
use couple_core::graph::{build_mnn_graph_from, knn, knn_self};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn knn_matches_full_sort() {
    let mut r = rng(41);
    for _ in 0..30 {
        let d = r.random_range(1..6);
        let (nq, nb) = (r.random_range(1..15), r.random_range(2..25));
        let q = random_matrix(&mut r, nq, d);
        let b = random_matrix(&mut r, nb, d);
        let k = r.random_range(1..=b.rows());
        let got = knn(&q, &b, k).unwrap();
        let want = knn_oracle(&q, &b, k, false);
        for (g, w) in got.iter().zip(&want) {
            let gi: Vec<usize> = g.iter().map(|p| p.0).collect();
            let wi: Vec<usize> = w.iter().map(|p| p.0).collect();
            assert_eq!(gi, wi);
            for (a, b) in g.iter().zip(w) {
                assert!((a.1 - b.1).abs() < 1e-12);
            }
        }
        let ks = k.min(b.rows() - 1).max(1);
        let got = knn_self(&b, ks).unwrap();
        let want = knn_oracle(&b, &b, ks, true);
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.iter().map(|p| p.0).collect::<Vec<_>>(), w.iter().map(|p| p.0).collect::<Vec<_>>());
        }
    }
}

#[test]
fn mnn_graph_matches_oracle() {
    let mut r = rng(42);
    for _ in 0..30 {
        let d = r.random_range(2..6);
        let ns = r.random_range(1..20);
        let nt = r.random_range(1..20);
        let s = random_matrix(&mut r, ns, d);
        let t = random_matrix(&mut r, nt, d);
        let labels: Vec<usize> = (0..ns).map(|_| r.random_range(0..3)).collect();
        let k = r.random_range(1..6);
        let g = build_mnn_graph_from(&s, &labels, &t, k).unwrap();
        let want = mnn_graph_oracle(&s, &labels, &t, k);
        let got = g.edges();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-12);
        }
        for i in 0..ns {
            assert_eq!(g.domain(i), Domain::Source);
        }
        for j in 0..nt {
            assert_eq!(g.domain(ns + j), Domain::Target);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = random_matrix(&mut r, 8, 3);
        let t = random_matrix(&mut r, 9, 3);
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let g = build_mnn_graph_from(&s, &labels, &t, 3).unwrap();
        for i in 0..g.num_nodes() {
            for &(j, w) in g.neighbors(i) {
                prop_assert!(w >= 0.0);
                prop_assert_eq!(g.weight(j, i), Some(w));
            }
        }
    }

    #[test]
    fn mnn_edges_are_mutual(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = random_matrix(&mut r, 10, 4);
        let t = random_matrix(&mut r, 10, 4);
        let labels = vec![0; 10];
        let g = build_mnn_graph_from(&s, &labels, &t, 2).unwrap();
        let t2s = knn(&t, &s, 2).unwrap();
        let s2t = knn(&s, &t, 2).unwrap();
        for (u, v, _) in g.edges() {
            if g.domain(u) == Domain::Source && g.domain(v) == Domain::Target {
                let j = v - 10;
                prop_assert!(t2s[j].iter().any(|p| p.0 == u));
                prop_assert!(s2t[u].iter().any(|p| p.0 == j));
            }
        }
    }
}
