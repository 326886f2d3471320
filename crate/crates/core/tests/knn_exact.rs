#![allow(clippy::needless_range_loop)]

use rand::RngExt;
use rerank_core::metricspace::{knn_search, knn_search_blocked, knn_self_excluded, similarity_block};
use rerank_core::FeatureMatrix;
use testkit::{full_sort_knn, ids, random_unit_rows, rng, Points};

fn fm(points: &Points) -> FeatureMatrix {
    FeatureMatrix::new(points[0].len(), points.concat(), ids("x", points.len())).unwrap()
}

fn table_rows(t: &rerank_core::NeighborTable) -> Vec<Vec<(u32, f32)>> {
    (0..t.rows())
        .map(|i| t.row_indices(i).iter().copied().zip(t.row_sims(i).iter().copied()).collect())
        .collect()
}

#[test]
fn matches_full_sort_on_random_instances() {
    let mut r = rng(7);
    for _ in 0..50 {
        let ng = r.random_range(1..=2000usize);
        let nq = r.random_range(1..=40usize);
        let d = r.random_range(1..=64usize);
        let k = r.random_range(1..=ng.min(20));
        let g = random_unit_rows(&mut r, ng, d);
        let q = random_unit_rows(&mut r, nq, d);
        let expected = full_sort_knn(&q, &g, k, false);
        let (qm, gm) = (fm(&q), fm(&g));
        assert_eq!(table_rows(&knn_search(&qm, &gm, k).unwrap()), expected);
        assert_eq!(table_rows(&knn_search_blocked(&qm, &gm, k, 7).unwrap()), expected);
    }
}

#[test]
fn ties_break_by_lower_index() {
    let mut r = rng(3);
    let base = random_unit_rows(&mut r, 30, 5);
    // each row appears three times
    let g: Points = base.iter().flat_map(|row| std::iter::repeat_n(row.clone(), 3)).collect();
    let expected = full_sort_knn(&base, &g, 7, false);
    let got = table_rows(&knn_search(&fm(&base), &fm(&g), 7).unwrap());
    assert_eq!(got, expected);
    for (i, row) in got.iter().enumerate() {
        assert_eq!(&row[..3].iter().map(|e| e.0).collect::<Vec<_>>(), &[3 * i as u32, 3 * i as u32 + 1, 3 * i as u32 + 2]);
    }
}

#[test]
fn self_excluded_matches_oracle() {
    let mut r = rng(11);
    for _ in 0..10 {
        let n = r.random_range(2..=300usize);
        let d = r.random_range(2..=32usize);
        let g = random_unit_rows(&mut r, n, d);
        let k = r.random_range(1..n.min(20));
        let got = table_rows(&knn_self_excluded(&fm(&g), k).unwrap());
        assert_eq!(got, full_sort_knn(&g, &g, k, true));
    }
}

#[test]
fn self_search_returns_self_first() {
    let mut r = rng(5);
    let g = random_unit_rows(&mut r, 100, 16);
    let t = knn_search(&fm(&g), &fm(&g), 3).unwrap();
    for i in 0..100 {
        assert_eq!(t.row_indices(i)[0], i as u32);
        assert!((t.row_sims(i)[0] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn block_matches_naive_products() {
    let mut r = rng(9);
    let a = random_unit_rows(&mut r, 13, 9);
    let b = random_unit_rows(&mut r, 17, 9);
    let s = similarity_block(&fm(&a), &fm(&b)).unwrap();
    for i in 0..13 {
        for j in 0..17 {
            assert_eq!(s.get(i, j), testkit::dot(&a[i], &b[j]) as f32);
        }
    }
}

#[test]
fn k_out_of_range_rejected() {
    let mut r = rng(1);
    let g = fm(&random_unit_rows(&mut r, 5, 3));
    assert!(knn_search(&g, &g, 0).is_err());
    assert!(knn_search(&g, &g, 6).is_err());
    assert!(knn_self_excluded(&g, 5).is_err());
}
