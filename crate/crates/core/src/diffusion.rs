//! Truncated graph diffusion over a mutual-kNN gallery graph.
//!
//! The graph `A` links `i` and `j` when each is among the other's `kd`
//! nearest neighbors, with weight `max(0, cos)^gamma_exp`. It is normalized
//! symmetrically as `S = D^-1/2 A D^-1/2`. For each query, a source vector
//! `y` on its `kd` nearest gallery items is propagated by solving
//! `(I - alpha S) f = y` with conjugate gradient, restricted to the query's
//! `n_trunc` most similar gallery items.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{Csr, FeatureMatrix, SparseRowMatrix};
use crate::metricspace::{knn_self_excluded, similarity_row, top_k_of_row};
use crate::{math, par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionParams {
    /// Neighbors per node for the affinity graph, and seeds per query.
    pub kd: usize,
    /// Gallery items kept in each query's subgraph.
    pub n_trunc: usize,
    pub alpha: f64,
    pub gamma_exp: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self { kd: 70, n_trunc: 10_000, alpha: 0.99, gamma_exp: 3.0, cg_tol: 1e-6, cg_max_iter: 20 }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Param(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.kd == 0 || self.n_trunc < self.kd {
            return Err(Error::Param(format!("need 1 <= kd ({}) <= n_trunc ({})", self.kd, self.n_trunc)));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Param(format!("cg_tol {} must be positive", self.cg_tol)));
        }
        if !(self.gamma_exp > 0.0) {
            return Err(Error::Param(format!("gamma_exp {} must be positive", self.gamma_exp)));
        }
        Ok(())
    }
}

/// Symmetric gallery graph with its degree-normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    adjacency: Csr<f64>,
    degree: Vec<f64>,
    normalized: Csr<f64>,
}

impl AffinityGraph {
    /// Unnormalized weights: symmetric, zero diagonal, all stored values positive.
    pub fn adjacency(&self) -> &Csr<f64> {
        &self.adjacency
    }

    /// Row sums of the adjacency; isolated nodes have degree 1.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn normalized(&self) -> &Csr<f64> {
        &self.normalized
    }

    pub fn nodes(&self) -> usize {
        self.degree.len()
    }
}

/// Edge weight for a cosine similarity.
#[inline]
pub fn affinity(cos: f64, gamma_exp: f64) -> f64 {
    let c = cos.max(0.0);
    if c == 0.0 {
        0.0
    } else {
        math::pow(c, gamma_exp)
    }
}

/// Mutual-kNN affinity graph over the gallery.
pub fn build_affinity(g: &FeatureMatrix, p: &DiffusionParams) -> Result<AffinityGraph> {
    p.validate()?;
    let n = g.rows();
    if n < 2 {
        return Err(Error::Param(format!("affinity graph needs at least 2 gallery items, got {n}")));
    }
    let table = knn_self_excluded(g, p.kd)?;
    let kd = p.kd;
    let rows = par::map_range(n, |i| {
        let mut row: Vec<(u32, f64)> = table
            .row_indices(i)
            .iter()
            .filter(|&&j| table.row_indices(j as usize).contains(&(i as u32)))
            .map(|&j| (j, affinity(math::dot_f32(g.row(i), g.row(j as usize)), p.gamma_exp)))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        debug_assert!(row.len() <= kd);
        row.sort_unstable_by_key(|e| e.0);
        row
    });
    let degree: Vec<f64> = rows
        .iter()
        .map(|r| {
            let d: f64 = r.iter().map(|e| e.1).sum();
            if d > 0.0 {
                d
            } else {
                1.0
            }
        })
        .collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / math::sqrt(*d)).collect();
    let norm_rows: Vec<Vec<(u32, f64)>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().map(|&(j, w)| (j, w * (inv_sqrt[i] * inv_sqrt[j as usize]))).collect())
        .collect();
    Ok(AffinityGraph {
        adjacency: Csr::from_rows(n, rows)?,
        degree,
        normalized: Csr::from_rows(n, norm_rows)?,
    })
}

/// Result of one conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub f: Vec<f64>,
    pub iterations: usize,
    /// Final `||r|| / ||y||`.
    pub relative_residual: f64,
}

/// Solves `(I - alpha S) f = y` by conjugate gradient starting from `f = y`.
///
/// `S` is applied matrix-free. Stops once `||r|| / ||y|| <= cg_tol` or after
/// `cg_max_iter` iterations. `alpha` may be any value in `[0, 1)`.
pub fn solve_linear(s: &Csr<f64>, y: &[f64], p: &DiffusionParams) -> Result<Solution> {
    let n = y.len();
    if s.rows() != n || s.cols() != n {
        return Err(Error::Shape(format!("{}x{} operator for a length-{n} source", s.rows(), s.cols())));
    }
    if !(p.alpha >= 0.0 && p.alpha < 1.0) {
        return Err(Error::Param(format!("alpha {} outside [0, 1)", p.alpha)));
    }
    if y.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Data("diffusion source must be non-negative".into()));
    }
    let y_norm = math::sqrt(math::dot_f64(y, y));
    if y_norm == 0.0 {
        return Err(Error::Data("diffusion source is all zero".into()));
    }
    let alpha = p.alpha;
    let mut f = y.to_vec();
    let mut tmp = vec![0.0; n];
    // r = y - (I - aS) y = a S y
    s.mul_vec(&f, &mut tmp);
    let mut r: Vec<f64> = tmp.iter().map(|v| alpha * v).collect();
    let mut rs = math::dot_f64(&r, &r);
    let mut rel = math::sqrt(rs) / y_norm;
    let mut dir = r.clone();
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    while rel > p.cg_tol && iterations < p.cg_max_iter {
        s.mul_vec(&dir, &mut tmp);
        for ((a, d), t) in ap.iter_mut().zip(&dir).zip(&tmp) {
            *a = d - alpha * t;
        }
        let pap = math::dot_f64(&dir, &ap);
        if !(pap > 0.0) {
            break;
        }
        let step = rs / pap;
        for ((fi, ri), (d, a)) in f.iter_mut().zip(r.iter_mut()).zip(dir.iter().zip(&ap)) {
            *fi += step * d;
            *ri -= step * a;
        }
        let rs_new = math::dot_f64(&r, &r);
        iterations += 1;
        rel = math::sqrt(rs_new) / y_norm;
        let beta = rs_new / rs;
        for (d, ri) in dir.iter_mut().zip(&r) {
            *d = ri + beta * *d;
        }
        rs = rs_new;
    }
    Ok(Solution { f, iterations, relative_residual: rel })
}

/// Gallery indices of the query's subgraph (ascending) and its seed indices.
fn query_subgraph(sims: &[f32], p: &DiffusionParams) -> (Vec<u32>, Vec<u32>) {
    let ng = sims.len();
    let seeds: Vec<u32> = top_k_of_row(sims, p.kd, None).into_iter().map(|e| e.0).collect();
    let mut nodes: Vec<u32> = if p.n_trunc >= ng {
        (0..ng as u32).collect()
    } else {
        top_k_of_row(sims, p.n_trunc, None).into_iter().map(|e| e.0).collect()
    };
    nodes.sort_unstable();
    (nodes, seeds)
}

/// Restriction of `s` to `nodes` (ascending), reindexed locally.
fn restrict(s: &Csr<f64>, nodes: &[u32]) -> Csr<f64> {
    let rows = nodes
        .iter()
        .map(|&gi| {
            let (idx, vals) = s.row(gi as usize);
            idx.iter()
                .zip(vals)
                .filter_map(|(c, v)| nodes.binary_search(c).ok().map(|local| (local as u32, *v)))
                .collect()
        })
        .collect();
    Csr::from_rows(nodes.len(), rows).expect("restriction preserves column order")
}

/// Diffusion similarity `S` (queries x gallery), defined on each query's subgraph.
pub fn diffuse_queries(q: &FeatureMatrix, g: &FeatureMatrix, graph: &AffinityGraph, p: &DiffusionParams) -> Result<SparseRowMatrix> {
    p.validate()?;
    if q.dim() != g.dim() {
        return Err(Error::Shape(format!("query dim {} vs gallery dim {}", q.dim(), g.dim())));
    }
    if graph.nodes() != g.rows() {
        return Err(Error::Shape(format!("graph has {} nodes, gallery {} rows", graph.nodes(), g.rows())));
    }
    if p.kd > g.rows() {
        return Err(Error::Param(format!("kd={} exceeds gallery size {}", p.kd, g.rows())));
    }
    let rows = par::try_map_range(q.rows(), |qi| {
        let sims = similarity_row(q, qi, g);
        let (nodes, seeds) = query_subgraph(&sims, p);
        let sub = if nodes.len() == g.rows() { graph.normalized.clone() } else { restrict(&graph.normalized, &nodes) };
        let mut y = vec![0.0; nodes.len()];
        for &s in &seeds {
            let local = nodes.binary_search(&s).expect("seeds lie inside the subgraph");
            y[local] = affinity(math::dot_f32(q.row(qi), g.row(s as usize)), p.gamma_exp);
        }
        let sol = solve_linear(&sub, &y, p).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("query {qi}: {m}")),
            other => other,
        })?;
        Ok(nodes.iter().zip(&sol.f).map(|(&gi, &v)| (gi, v.max(0.0) as f32)).collect::<Vec<_>>())
    })?;
    SparseRowMatrix::from_rows(g.rows(), rows)
}
