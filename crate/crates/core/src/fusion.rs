//! Score fusion `S_final = S - lambda * D` and top-K ranking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::kreciprocal::KReciprocalParams;
use crate::matrix::SparseRowMatrix;
use crate::metricspace::rank_order;
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub lambda: f64,
    pub top_k: usize,
    /// Stand-in for a `D` entry that was never computed.
    pub d_max_fill: f64,
    /// Stand-in for an `S` entry outside the diffusion subgraph.
    pub s_min_fill: f64,
    /// Min-max scale the defined `S` and `D` entries of each row to `[0, 1]`
    /// before combining. Fill values then become 0 for `S` and 1 for `D`.
    pub normalize_before_fuse: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            top_k: 100,
            d_max_fill: KReciprocalParams::default().d_max(),
            s_min_fill: 0.0,
            normalize_before_fuse: false,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Param(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.top_k == 0 {
            return Err(Error::Param("top_k must be at least 1".into()));
        }
        if !self.d_max_fill.is_finite() || !self.s_min_fill.is_finite() {
            return Err(Error::Param("fill values must be finite".into()));
        }
        Ok(())
    }
}

/// Ordered retrieval list for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    /// `(gallery id, final score)`, scores non-increasing.
    pub entries: Vec<(String, f32)>,
}

impl RankedResult {
    pub fn gallery_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }
}

fn min_max(vals: &[f32]) -> (f64, f64) {
    let lo = vals.iter().fold(f64::INFINITY, |a, &v| a.min(f64::from(v)));
    let hi = vals.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
    (lo, hi)
}

fn scaler(vals: &[f32], enabled: bool) -> impl Fn(f32) -> f64 {
    let (lo, hi) = if enabled && !vals.is_empty() { min_max(vals) } else { (0.0, 1.0) };
    let span = hi - lo;
    move |v| {
        let v = f64::from(v);
        if !enabled {
            v
        } else if span > 0.0 {
            (v - lo) / span
        } else {
            0.0
        }
    }
}

fn fuse_row(s: (&[u32], &[f32]), d: (&[u32], &[f32]), p: &FusionParams) -> Vec<(u32, f32)> {
    let (si, sv) = s;
    let (di, dv) = d;
    let norm_s = scaler(sv, p.normalize_before_fuse);
    let norm_d = scaler(dv, p.normalize_before_fuse);
    let (s_fill, d_fill) = if p.normalize_before_fuse { (0.0, 1.0) } else { (p.s_min_fill, p.d_max_fill) };
    let combine = |s: f64, d: f64| (s - p.lambda * d) as f32;
    let mut out = Vec::with_capacity(si.len().max(di.len()));
    let (mut a, mut b) = (0, 0);
    while a < si.len() || b < di.len() {
        if b >= di.len() || (a < si.len() && si[a] < di[b]) {
            out.push((si[a], combine(norm_s(sv[a]), d_fill)));
            a += 1;
        } else if a >= si.len() || di[b] < si[a] {
            out.push((di[b], combine(s_fill, norm_d(dv[b]))));
            b += 1;
        } else {
            out.push((si[a], combine(norm_s(sv[a]), norm_d(dv[b]))));
            a += 1;
            b += 1;
        }
    }
    out
}

/// Combines diffusion similarity and re-ranking distance over the union of
/// their defined entries.
pub fn fuse_scores(s: &SparseRowMatrix, d: &SparseRowMatrix, p: &FusionParams) -> Result<SparseRowMatrix> {
    p.validate()?;
    if s.rows() != d.rows() || s.cols() != d.cols() {
        return Err(Error::Shape(format!("S is {}x{}, D is {}x{}", s.rows(), s.cols(), d.rows(), d.cols())));
    }
    let rows = par::map_range(s.rows(), |r| fuse_row(s.row(r), d.row(r), p));
    SparseRowMatrix::from_rows(s.cols(), rows)
}

/// Top-`k` `(column, score)` pairs of one sparse row, descending, ties by lower column.
pub fn rank_row(idx: &[u32], vals: &[f32], k: usize) -> Vec<(u32, f32)> {
    if k == 0 {
        return Vec::new();
    }
    let mut entries: Vec<(u32, f32)> = idx.iter().copied().zip(vals.iter().copied()).collect();
    if k < entries.len() {
        entries.select_nth_unstable_by(k - 1, rank_order);
        entries.truncate(k);
    }
    entries.sort_unstable_by(rank_order);
    entries
}

/// Per-query ranked gallery lists, queries in input order.
pub fn rank_topk(s_final: &SparseRowMatrix, query_ids: &[String], gallery_ids: &[String], p: &FusionParams) -> Result<Vec<RankedResult>> {
    p.validate()?;
    if s_final.rows() != query_ids.len() || s_final.cols() != gallery_ids.len() {
        return Err(Error::Shape(format!(
            "score matrix {}x{} vs {} query ids and {} gallery ids",
            s_final.rows(),
            s_final.cols(),
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    Ok(par::map_range(s_final.rows(), |r| {
        let (idx, vals) = s_final.row(r);
        RankedResult {
            query_id: query_ids[r].clone(),
            entries: rank_row(idx, vals, p.top_k)
                .into_iter()
                .map(|(c, v)| (gallery_ids[c as usize].clone(), v))
                .collect(),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use alloc::vec::Vec;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("{prefix}{i}")).collect()
    }

    #[test]
    fn eq2_arithmetic_and_fill() {
        let s = SparseRowMatrix::from_rows(3, vec![vec![(0, 0.9)]]).unwrap();
        let d = SparseRowMatrix::from_rows(3, vec![vec![(0, 0.2), (2, 0.5)]]).unwrap();
        let p = FusionParams::default();
        let f = fuse_scores(&s, &d, &p).unwrap();
        assert!((f.get(0, 0).unwrap() - 0.7).abs() < 1e-7);
        assert_eq!(f.get(0, 2), Some(-0.5));
        assert_eq!(f.get(0, 1), None);
    }

    #[test]
    fn absent_d_uses_fill() {
        let s = SparseRowMatrix::from_rows(2, vec![vec![(1, 0.4)], vec![]]).unwrap();
        let d = SparseRowMatrix::from_rows(2, vec![vec![], vec![]]).unwrap();
        let p = FusionParams { d_max_fill: 1.3, ..Default::default() };
        let f = fuse_scores(&s, &d, &p).unwrap();
        assert_eq!(f.get(0, 1), Some((0.4f64 - 1.3) as f32));
        assert_eq!(f.row(1).0.len(), 0);
    }

    #[test]
    fn shape_mismatch() {
        let s = SparseRowMatrix::from_rows(2, vec![vec![]]).unwrap();
        let d = SparseRowMatrix::from_rows(3, vec![vec![]]).unwrap();
        assert!(matches!(fuse_scores(&s, &d, &FusionParams::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn topk_order_and_ties() {
        let m = SparseRowMatrix::from_rows(2, vec![vec![(0, 0.5), (1, 0.9)], vec![(0, 0.5), (1, 0.5)]]).unwrap();
        let q = ids("q", 2);
        let g = ids("g", 2);
        let one = rank_topk(&m, &q, &g, &FusionParams { top_k: 1, ..Default::default() }).unwrap();
        assert_eq!(one[0].gallery_ids().collect::<Vec<_>>(), vec!["g1"]);
        let two = rank_topk(&m, &q, &g, &FusionParams { top_k: 2, ..Default::default() }).unwrap();
        assert_eq!(two[1].gallery_ids().collect::<Vec<_>>(), vec!["g0", "g1"]);
        assert_eq!(two[1].query_id, "q1".to_string());
    }

    #[test]
    fn normalized_fusion_scales_rows() {
        let s = SparseRowMatrix::from_rows(2, vec![vec![(0, 2.0), (1, 4.0)]]).unwrap();
        let d = SparseRowMatrix::from_rows(2, vec![vec![(0, 0.5), (1, 1.5)]]).unwrap();
        let p = FusionParams { normalize_before_fuse: true, ..Default::default() };
        let f = fuse_scores(&s, &d, &p).unwrap();
        assert_eq!(f.row(0).1, &[0.0, 0.0]);
    }
}
