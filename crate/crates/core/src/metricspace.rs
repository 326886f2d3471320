//! Exact cosine similarity and brute-force kNN over L2-normalized features.
//!
//! Similarities are accumulated in `f64` per pair and stored as `f32`. The
//! top-k order is descending similarity with ties broken by the lower target
//! index, so results never depend on how rows are partitioned across workers.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::matrix::{FeatureMatrix, NeighborTable};
use crate::{math, par, Error, Result};

/// Default number of query rows handled per similarity block.
pub const DEFAULT_BLOCK_ROWS: usize = 1024;

/// Dense `|a| x |b|` row-major similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl SimilarityBlock {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

fn check_dims(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Similarity of row `i` of `a` to every row of `b`.
pub fn similarity_row(a: &FeatureMatrix, i: usize, b: &FeatureMatrix) -> Vec<f32> {
    let q = a.row(i);
    (0..b.rows()).map(|j| math::dot_f32(q, b.row(j)) as f32).collect()
}

/// All pairwise inner products between the rows of `a` and `b`.
pub fn similarity_block(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<SimilarityBlock> {
    check_dims(a, b)?;
    let rows = par::map_range(a.rows(), |i| similarity_row(a, i, b));
    Ok(SimilarityBlock { rows: a.rows(), cols: b.rows(), values: rows.concat() })
}

/// Descending similarity, then ascending index.
#[inline]
pub(crate) fn rank_order(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top-`k` of a similarity row, skipping `exclude` if given.
pub(crate) fn top_k_of_row(sims: &[f32], k: usize, exclude: Option<usize>) -> Vec<(u32, f32)> {
    let mut cand: Vec<(u32, f32)> = sims
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, &s)| (j as u32, s))
        .collect();
    if k < cand.len() {
        if k > 0 {
            cand.select_nth_unstable_by(k - 1, rank_order);
        }
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_order);
    cand
}

fn pack(k: usize, rows: Vec<Vec<(u32, f32)>>) -> NeighborTable {
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut sims = Vec::with_capacity(rows.len() * k);
    for r in rows {
        for (j, s) in r {
            indices.push(j);
            sims.push(s);
        }
    }
    NeighborTable::new(k, indices, sims).expect("rows have exactly k entries")
}

fn knn_impl(q: &FeatureMatrix, g: &FeatureMatrix, k: usize, block_rows: usize, exclude_self: bool) -> Result<NeighborTable> {
    check_dims(q, g)?;
    let available = if exclude_self { g.rows().saturating_sub(1) } else { g.rows() };
    if k == 0 || k > available {
        return Err(Error::Param(format!("k={k} must be in 1..={available}")));
    }
    let block_rows = block_rows.max(1);
    let mut rows = Vec::with_capacity(q.rows());
    let mut start = 0;
    while start < q.rows() {
        let end = (start + block_rows).min(q.rows());
        rows.extend(par::map_range(end - start, |off| {
            let i = start + off;
            let sims = similarity_row(q, i, g);
            top_k_of_row(&sims, k, exclude_self.then_some(i))
        }));
        start = end;
    }
    Ok(pack(k, rows))
}

/// Exact top-`k` gallery neighbors for every query row.
pub fn knn_search(q: &FeatureMatrix, g: &FeatureMatrix, k: usize) -> Result<NeighborTable> {
    knn_impl(q, g, k, DEFAULT_BLOCK_ROWS, false)
}

/// [`knn_search`] with an explicit number of query rows per block.
pub fn knn_search_blocked(q: &FeatureMatrix, g: &FeatureMatrix, k: usize, block_rows: usize) -> Result<NeighborTable> {
    knn_impl(q, g, k, block_rows, false)
}

/// Neighbors of each row of `g` within `g` itself, excluding the row.
pub fn knn_self_excluded(g: &FeatureMatrix, k: usize) -> Result<NeighborTable> {
    knn_impl(g, g, k, DEFAULT_BLOCK_ROWS, true)
}

/// Euclidean distance between unit vectors with cosine similarity `s`.
#[inline]
pub fn cosine_to_euclidean(s: f64) -> f64 {
    let s = s.clamp(-1.0, 1.0);
    math::sqrt((2.0 - 2.0 * s).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::{String, ToString};
    use alloc::vec;

    fn fm(dim: usize, data: Vec<f32>) -> FeatureMatrix {
        let n = data.len() / dim;
        FeatureMatrix::new(dim, data, (0..n).map(|i| i.to_string()).collect::<Vec<String>>()).unwrap()
    }

    #[test]
    fn orthogonal_and_identical() {
        let a = fm(2, vec![1.0, 0.0]);
        let b = fm(2, vec![0.0, 1.0, 1.0, 0.0]);
        let s = similarity_block(&a, &b).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert!((s.get(0, 1) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let a = fm(2, vec![1.0, 0.0]);
        let b = fm(3, vec![1.0, 0.0, 0.0]);
        assert!(matches!(similarity_block(&a, &b), Err(Error::Shape(_))));
        assert!(knn_search(&a, &b, 1).is_err());
    }

    #[test]
    fn query_finds_its_copy() {
        let g = fm(2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.6, 0.8]);
        let q = fm(2, vec![0.6, 0.8]);
        let t = knn_search(&q, &g, 1).unwrap();
        assert_eq!(t.row_indices(0), &[3]);
        assert!((t.row_sims(0)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ties_break_by_index() {
        let g = fm(2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let q = fm(2, vec![0.0, 1.0]);
        let t = knn_search(&q, &g, 2).unwrap();
        assert_eq!(t.row_indices(0), &[0, 1]);
    }

    #[test]
    fn k_bounds() {
        let g = fm(2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(knn_search(&g, &g, 3), Err(Error::Param(_))));
        assert!(matches!(knn_search(&g, &g, 0), Err(Error::Param(_))));
        assert!(matches!(knn_self_excluded(&g, 2), Err(Error::Param(_))));
        assert_eq!(knn_self_excluded(&g, 1).unwrap().row_indices(0), &[1]);
    }

    #[test]
    fn self_is_first_neighbor() {
        let g = fm(2, vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0]);
        let t = knn_search(&g, &g, 2).unwrap();
        for i in 0..3 {
            assert_eq!(t.row_indices(i)[0] as usize, i);
        }
    }

    #[test]
    fn euclidean_from_cosine() {
        assert_eq!(cosine_to_euclidean(1.0), 0.0);
        assert_eq!(cosine_to_euclidean(-1.0), 2.0);
        assert_eq!(cosine_to_euclidean(0.5), 1.0);
        assert_eq!(cosine_to_euclidean(1.0 + 1e-7), 0.0);
    }

    #[test]
    fn blocking_does_not_change_results() {
        let data: Vec<f32> = (0..60).map(|i| ((i * 37 % 17) as f32) - 8.0).collect();
        let g = fm(3, data).l2_normalize().unwrap();
        let a = knn_search_blocked(&g, &g, 5, 1).unwrap();
        let b = knn_search_blocked(&g, &g, 5, 7).unwrap();
        let c = knn_search(&g, &g, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }
}
