//! k-reciprocal re-ranking.
//!
//! Neighbor structure is built over a union set (queries followed by gallery,
//! or one query followed by the gallery). For every item `p`:
//!
//! 1. `R(p, k1)`: items `g` in the top-`k1` of `p` that also have `p` in their top-`k1`.
//! 2. `R*(p)`: `R(p, k1)` plus every `R(q, k1/2)` (`q` in `R(p, k1)`) that overlaps
//!    `R(p, k1)` in at least two thirds of its members. `p` itself is never included.
//! 3. `V(p)`: sparse vector with weight `exp(-d(p, g))` on each `g` in `R*(p)`.
//! 4. `V'(p)`: mean of `V` over `p` and its `k2 - 1` nearest neighbors.
//!
//! The final distance is `(1 - lambda_value) * jaccard(V'(q), V'(g)) + lambda_value * d(q, g)`
//! with `d` the Euclidean distance between unit vectors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{Csr, FeatureMatrix, NeighborTable, SparseRowMatrix};
use crate::metricspace::{cosine_to_euclidean, knn_self_excluded, rank_order, similarity_row, top_k_of_row};
use crate::{math, par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KReciprocalParams {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the Euclidean term; `1 - lambda_value` goes to Jaccard.
    pub lambda_value: f64,
}

impl Default for KReciprocalParams {
    fn default() -> Self {
        Self { k1: 260, k2: 30, lambda_value: 0.3 }
    }
}

impl KReciprocalParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 {
            return Err(Error::Param("k1 must be positive".into()));
        }
        if self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::Param(format!("k2={} must be in 1..=k1={}", self.k2, self.k1)));
        }
        if !(0.0..=1.0).contains(&self.lambda_value) {
            return Err(Error::Param(format!("lambda_value {} outside [0, 1]", self.lambda_value)));
        }
        Ok(())
    }

    /// Largest value `D` can take; used for absent entries downstream.
    pub fn d_max(&self) -> f64 {
        (1.0 - self.lambda_value) + 2.0 * self.lambda_value
    }
}

/// Which items share the neighbor graph with each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborPool {
    /// All queries and all gallery items form one union set.
    #[default]
    Pooled,
    /// Each query is ranked against the gallery alone; queries never see each other.
    GalleryOnly,
}

/// Per-query gallery candidates for which `D` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateMode {
    Full,
    /// Top-n gallery items by initial cosine similarity.
    Top(usize),
}

/// Sparse reciprocal encoding, one row per union item.
pub type EncodedSet = Csr<f64>;

/// Candidate gallery indices per query, ascending.
pub fn candidate_sets(q: &FeatureMatrix, g: &FeatureMatrix, mode: CandidateMode) -> Result<Vec<Vec<u32>>> {
    let full: Vec<u32> = (0..g.rows() as u32).collect();
    match mode {
        CandidateMode::Top(n) if n < g.rows() => {
            if n == 0 {
                return Err(Error::Param("candidate count must be positive".into()));
            }
            let table = crate::metricspace::knn_search(q, g, n)?;
            Ok((0..q.rows())
                .map(|i| {
                    let mut c = table.row_indices(i).to_vec();
                    c.sort_unstable();
                    c
                })
                .collect())
        }
        _ => Ok(vec![full; q.rows()]),
    }
}

/// `R(p, k)` from a self-excluded neighbor table, ascending.
pub fn reciprocal_set(nbrs: &NeighborTable, p: usize, k: usize) -> Vec<u32> {
    let mut out: Vec<u32> = nbrs.row_indices(p)[..k]
        .iter()
        .copied()
        .filter(|&g| nbrs.row_indices(g as usize)[..k].contains(&(p as u32)))
        .collect();
    out.sort_unstable();
    out
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn expand_one(nbrs: &NeighborTable, p: usize, k1: usize) -> Vec<u32> {
    let base = reciprocal_set(nbrs, p, k1);
    let half = k1 / 2;
    let mut out = base.clone();
    for &q in &base {
        let cand = reciprocal_set(nbrs, q as usize, half);
        if 3 * sorted_intersection_len(&cand, &base) >= 2 * cand.len() {
            out.extend_from_slice(&cand);
        }
    }
    out.sort_unstable();
    out.dedup();
    out.retain(|&x| x as usize != p);
    out
}

/// `R*(p)` for every row of a self-excluded neighbor table.
pub fn reciprocal_expand(nbrs: &NeighborTable, k1: usize) -> Result<Vec<Vec<u32>>> {
    if k1 == 0 || k1 > nbrs.k() {
        return Err(Error::Param(format!("k1={k1} must be in 1..={}", nbrs.k())));
    }
    Ok(par::map_range(nbrs.rows(), |p| expand_one(nbrs, p, k1)))
}

fn encode_row(p: usize, r_star: &[u32], dist: &(impl Fn(usize, usize) -> f64 + ?Sized)) -> Vec<(u32, f64)> {
    r_star.iter().map(|&g| (g, math::exp(-dist(p, g as usize)))).collect()
}

/// Gaussian-kernel encoding: row `p` holds `exp(-dist(p, g))` for `g` in `r_star[p]`.
pub fn encode_weights<F>(r_star: &[Vec<u32>], cols: usize, dist: F) -> Result<EncodedSet>
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    let rows = par::map_range(r_star.len(), |p| encode_row(p, &r_star[p], &dist));
    EncodedSet::from_rows(cols, rows)
}

/// Adds a sparse row into `acc`.
fn accumulate(acc: &mut BTreeMap<u32, f64>, idx: &[u32], vals: &[f64]) {
    for (c, v) in idx.iter().zip(vals) {
        *acc.entry(*c).or_insert(0.0) += v;
    }
}

fn finish_mean(acc: BTreeMap<u32, f64>, k2: usize) -> Vec<(u32, f64)> {
    let inv = 1.0 / k2 as f64;
    acc.into_iter().map(|(c, v)| (c, v * inv)).collect()
}

/// Averages each encoding row with those of its `k2 - 1` nearest neighbors.
/// The row itself counts as its own first neighbor.
pub fn local_query_expansion(v: &EncodedSet, nbrs: &NeighborTable, k2: usize) -> Result<EncodedSet> {
    if k2 == 0 {
        return Err(Error::Param("k2 must be positive".into()));
    }
    if k2 - 1 > nbrs.k() {
        return Err(Error::Param(format!("k2={k2} exceeds neighbor table width {} + 1", nbrs.k())));
    }
    if nbrs.rows() != v.rows() {
        return Err(Error::Shape(format!("{} encoding rows vs {} neighbor rows", v.rows(), nbrs.rows())));
    }
    let rows = par::map_range(v.rows(), |p| {
        let mut acc = BTreeMap::new();
        let (idx, vals) = v.row(p);
        accumulate(&mut acc, idx, vals);
        for &q in &nbrs.row_indices(p)[..k2 - 1] {
            let (idx, vals) = v.row(q as usize);
            accumulate(&mut acc, idx, vals);
        }
        finish_mean(acc, k2)
    });
    EncodedSet::from_rows(v.cols(), rows)
}

/// Weighted Jaccard distance `1 - sum(min) / sum(max)` of two sparse rows.
/// Two empty rows are at distance 1.
pub fn jaccard_distance(vp: (&[u32], &[f64]), vg: (&[u32], &[f64])) -> f64 {
    let (ia, va) = vp;
    let (ib, vb) = vg;
    let (mut i, mut j) = (0, 0);
    let (mut min_sum, mut max_sum) = (0.0, 0.0);
    while i < ia.len() || j < ib.len() {
        let take_a = j >= ib.len() || (i < ia.len() && ia[i] < ib[j]);
        let take_b = i >= ia.len() || (j < ib.len() && ib[j] < ia[i]);
        if take_a {
            max_sum += va[i];
            i += 1;
        } else if take_b {
            max_sum += vb[j];
            j += 1;
        } else {
            min_sum += va[i].min(vb[j]);
            max_sum += va[i].max(vb[j]);
            i += 1;
            j += 1;
        }
    }
    if max_sum <= 0.0 {
        return 1.0;
    }
    (1.0 - min_sum / max_sum).clamp(0.0, 1.0)
}

/// Queries `q_start..q_start + nq` followed by the whole gallery.
struct Union<'a> {
    q: &'a FeatureMatrix,
    q_start: usize,
    nq: usize,
    g: &'a FeatureMatrix,
}

impl Union<'_> {
    fn len(&self) -> usize {
        self.nq + self.g.rows()
    }

    fn row(&self, p: usize) -> &[f32] {
        if p < self.nq {
            self.q.row(self.q_start + p)
        } else {
            self.g.row(p - self.nq)
        }
    }

    fn dist(&self, a: usize, b: usize) -> f64 {
        cosine_to_euclidean(math::dot_f32(self.row(a), self.row(b)))
    }
}

const ABSENT: u32 = u32::MAX;

/// Distance rows for every query of `u`, restricted to `candidates`.
fn rerank_union(u: &Union, table: &NeighborTable, p: &KReciprocalParams, candidates: &[Vec<u32>]) -> Vec<Vec<(u32, f32)>> {
    let n = u.len();
    let nq = u.nq;
    // Items whose expanded encoding V' is needed.
    let mut need_expanded = vec![false; n];
    need_expanded[..nq].iter_mut().for_each(|x| *x = true);
    for c in candidates {
        for &j in c {
            need_expanded[nq + j as usize] = true;
        }
    }
    let expanded_items: Vec<usize> = (0..n).filter(|&i| need_expanded[i]).collect();
    // Items whose raw encoding V is needed by those expansions.
    let mut need_raw = vec![false; n];
    for &i in &expanded_items {
        need_raw[i] = true;
        for &j in &table.row_indices(i)[..p.k2 - 1] {
            need_raw[j as usize] = true;
        }
    }
    let raw_items: Vec<usize> = (0..n).filter(|&i| need_raw[i]).collect();
    let mut raw_pos = vec![ABSENT; n];
    for (pos, &i) in raw_items.iter().enumerate() {
        raw_pos[i] = pos as u32;
    }
    let raw: Vec<Vec<(u32, f64)>> = par::map_range(raw_items.len(), |pos| {
        let i = raw_items[pos];
        let r_star = expand_one(table, i, p.k1);
        encode_row(i, &r_star, &|a, b| u.dist(a, b))
    });

    let mut exp_pos = vec![ABSENT; n];
    for (pos, &i) in expanded_items.iter().enumerate() {
        exp_pos[i] = pos as u32;
    }
    let expanded: Vec<(Vec<u32>, Vec<f64>)> = par::map_range(expanded_items.len(), |pos| {
        let i = expanded_items[pos];
        let mut acc = BTreeMap::new();
        let add = |acc: &mut BTreeMap<u32, f64>, item: usize| {
            let row = &raw[raw_pos[item] as usize];
            for &(c, v) in row {
                *acc.entry(c).or_insert(0.0) += v;
            }
        };
        add(&mut acc, i);
        for &j in &table.row_indices(i)[..p.k2 - 1] {
            add(&mut acc, j as usize);
        }
        finish_mean(acc, p.k2).into_iter().unzip()
    });

    let lam = p.lambda_value;
    par::map_range(nq, |qi| {
        let (qa, qv) = &expanded[exp_pos[qi] as usize];
        candidates[qi]
            .iter()
            .map(|&j| {
                let gi = nq + j as usize;
                let (ga, gv) = &expanded[exp_pos[gi] as usize];
                let jac = jaccard_distance((qa, qv), (ga, gv));
                let euc = u.dist(qi, gi);
                (j, ((1.0 - lam) * jac + lam * euc) as f32)
            })
            .collect()
    })
}

fn check_candidates(candidates: &[Vec<u32>], nq: usize, ng: usize) -> Result<()> {
    if candidates.len() != nq {
        return Err(Error::Shape(format!("{} candidate lists for {nq} queries", candidates.len())));
    }
    for (i, c) in candidates.iter().enumerate() {
        if c.windows(2).any(|w| w[0] >= w[1]) || c.last().is_some_and(|&j| j as usize >= ng) {
            return Err(Error::Data(format!("candidate list {i} not ascending within 0..{ng}")));
        }
    }
    Ok(())
}

/// Neighbor table over `{query} ∪ gallery` derived from a self-excluded
/// gallery table, identical to searching the union directly.
fn single_query_table(q: &FeatureMatrix, qi: usize, g: &FeatureMatrix, gallery: &NeighborTable, k1: usize) -> NeighborTable {
    let sims = similarity_row(q, qi, g);
    let mut indices = Vec::with_capacity((g.rows() + 1) * k1);
    let mut values = Vec::with_capacity((g.rows() + 1) * k1);
    for (j, s) in top_k_of_row(&sims, k1, None) {
        indices.push(j + 1);
        values.push(s);
    }
    for (j, &sim) in sims.iter().enumerate() {
        let mut row: Vec<(u32, f32)> = gallery
            .row_indices(j)
            .iter()
            .zip(gallery.row_sims(j))
            .map(|(&x, &s)| (x + 1, s))
            .collect();
        row.push((0, sim));
        row.sort_by(rank_order);
        row.truncate(k1);
        for (x, s) in row {
            indices.push(x);
            values.push(s);
        }
    }
    NeighborTable::new(k1, indices, values).expect("k1 entries per row")
}

/// k-reciprocal distance matrix `D` (queries x gallery), defined on each
/// query's candidate set.
pub fn kreciprocal_rerank(
    q: &FeatureMatrix,
    g: &FeatureMatrix,
    p: &KReciprocalParams,
    candidates: &[Vec<u32>],
    pool: NeighborPool,
) -> Result<SparseRowMatrix> {
    p.validate()?;
    if q.dim() != g.dim() {
        return Err(Error::Shape(format!("query dim {} vs gallery dim {}", q.dim(), g.dim())));
    }
    check_candidates(candidates, q.rows(), g.rows())?;
    let rows = match pool {
        NeighborPool::Pooled => {
            let union_size = q.rows() + g.rows();
            if p.k1 + 1 > union_size {
                return Err(Error::Param(format!("k1={} needs at least {} pooled items, have {union_size}", p.k1, p.k1 + 1)));
            }
            if q.rows() == 0 {
                Vec::new()
            } else {
                let mut all = q.data().to_vec();
                all.extend_from_slice(g.data());
                let ids = (0..union_size).map(|i| alloc::format!("{i}")).collect();
                let pooled = FeatureMatrix::new(q.dim(), all, ids)?;
                let table = knn_self_excluded(&pooled, p.k1)?;
                let u = Union { q, q_start: 0, nq: q.rows(), g };
                rerank_union(&u, &table, p, candidates)
            }
        }
        NeighborPool::GalleryOnly => {
            if p.k1 > g.rows() {
                return Err(Error::Param(format!("k1={} exceeds gallery size {}", p.k1, g.rows())));
            }
            let width = p.k1.min(g.rows().saturating_sub(1));
            let gallery = if width == 0 { None } else { Some(knn_self_excluded(g, width)?) };
            par::map_range(q.rows(), |qi| {
                let table = match &gallery {
                    Some(t) => single_query_table(q, qi, g, t, p.k1),
                    None => single_item_table(q, qi, g),
                };
                let u = Union { q, q_start: qi, nq: 1, g };
                rerank_union(&u, &table, p, core::slice::from_ref(&candidates[qi])).pop().unwrap_or_default()
            })
        }
    };
    SparseRowMatrix::from_rows(g.rows(), rows)
}

/// Union of one query and a one-item gallery: each is the other's only neighbor.
fn single_item_table(q: &FeatureMatrix, qi: usize, g: &FeatureMatrix) -> NeighborTable {
    let s = math::dot_f32(q.row(qi), g.row(0)) as f32;
    NeighborTable::new(1, vec![1, 0], vec![s, s]).expect("two rows")
}
