//! Brute-force reference implementations used only by tests.
//!
//! Everything here works on plain nested `Vec`s and dense matrices so that
//! it shares no code path with the sparse, blocked implementations under test.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Points = Vec<Vec<f32>>;
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(mut v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v.into_iter().map(|x| x as f32).collect()
}

pub fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Points {
    (0..n)
        .map(|_| unit((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
        .collect()
}

fn centers(rng: &mut ChaCha8Rng, clusters: usize, d: usize) -> Vec<Vec<f64>> {
    (0..clusters)
        .map(|_| unit((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).into_iter().map(f64::from).collect())
        .collect()
}

fn around(rng: &mut ChaCha8Rng, centers: &[Vec<f64>], per: usize, sigma: f64) -> (Points, Vec<usize>) {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            pts.push(unit(center.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect()));
            labels.push(c);
        }
    }
    (pts, labels)
}

/// `clusters * per` unit points around random unit centers; returns points and cluster labels.
pub fn clustered(rng: &mut ChaCha8Rng, clusters: usize, per: usize, d: usize, sigma: f64) -> (Points, Vec<usize>) {
    let c = centers(rng, clusters, d);
    around(rng, &c, per, sigma)
}

/// Gallery and query sets drawn around the same cluster centers.
pub struct Split {
    pub gallery: Points,
    pub gallery_labels: Vec<usize>,
    pub queries: Points,
    pub query_labels: Vec<usize>,
}

pub fn clustered_split(rng: &mut ChaCha8Rng, clusters: usize, per_gallery: usize, per_query: usize, d: usize, sigma: f64) -> Split {
    let c = centers(rng, clusters, d);
    let (gallery, gallery_labels) = around(rng, &c, per_gallery, sigma);
    let (queries, query_labels) = around(rng, &c, per_query, sigma);
    Split { gallery, gallery_labels, queries, query_labels }
}

pub fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn random_f64(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Naive dot product, `f64` accumulation in index order.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

pub fn euclid(a: &[f32], b: &[f32]) -> f64 {
    (2.0 - 2.0 * dot(a, b).clamp(-1.0, 1.0)).max(0.0).sqrt()
}

/// Full ranking of `targets` for one query: every index sorted by
/// descending `f32` similarity, ties by index.
pub fn full_ranking(query: &[f32], targets: &Points, exclude: Option<usize>) -> Vec<(u32, f32)> {
    let mut all: Vec<(u32, f32)> = targets
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, t)| (j as u32, dot(query, t) as f32))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all
}

/// Full-sort kNN oracle.
pub fn full_sort_knn(q: &Points, g: &Points, k: usize, exclude_self: bool) -> Vec<Vec<(u32, f32)>> {
    q.iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = full_ranking(row, g, exclude_self.then_some(i));
            r.truncate(k);
            r
        })
        .collect()
}

fn mask_of(ranking: &[(u32, f32)], k: usize, n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    for e in &ranking[..k] {
        m[e.0 as usize] = true;
    }
    m
}

/// Dense k-reciprocal pipeline over `points` (every row is an item).
pub struct DenseKReciprocal {
    pub rankings: Vec<Vec<(u32, f32)>>,
    pub r_star: Vec<Vec<bool>>,
    pub v: Vec<Vec<f64>>,
    pub v_expanded: Vec<Vec<f64>>,
}

pub fn dense_kreciprocal_structures(points: &Points, k1: usize, k2: usize) -> DenseKReciprocal {
    let n = points.len();
    let rankings: Vec<Vec<(u32, f32)>> = (0..n).map(|i| full_ranking(&points[i], points, Some(i))).collect();
    let masks = |k: usize| -> Vec<Vec<bool>> { rankings.iter().map(|r| mask_of(r, k, n)).collect() };
    let recip = |nn: &Vec<Vec<bool>>| -> Vec<Vec<bool>> {
        (0..n).map(|i| (0..n).map(|j| nn[i][j] && nn[j][i]).collect()).collect()
    };
    let r_full = recip(&masks(k1));
    let r_half = recip(&masks(k1 / 2));
    let mut r_star = r_full.clone();
    for i in 0..n {
        for j in 0..n {
            if !r_full[i][j] {
                continue;
            }
            let size = r_half[j].iter().filter(|&&b| b).count();
            let overlap = (0..n).filter(|&x| r_half[j][x] && r_full[i][x]).count();
            if 3 * overlap >= 2 * size {
                for x in 0..n {
                    if r_half[j][x] {
                        r_star[i][x] = true;
                    }
                }
            }
        }
        r_star[i][i] = false;
    }
    let v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if r_star[i][j] { (-euclid(&points[i], &points[j])).exp() } else { 0.0 }).collect())
        .collect();
    let v_expanded = dense_lqe(&v, &rankings, k2);
    DenseKReciprocal { rankings, r_star, v, v_expanded }
}

/// `V'(i) = (V(i) + sum of V over the first k2 - 1 ranked neighbors) / k2`.
pub fn dense_lqe(v: &[Vec<f64>], rankings: &[Vec<(u32, f32)>], k2: usize) -> Vec<Vec<f64>> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut acc = v[i].clone();
            for e in &rankings[i][..k2 - 1] {
                for (a, b) in acc.iter_mut().zip(&v[e.0 as usize]) {
                    *a += b;
                }
            }
            acc.into_iter().map(|x| x / k2 as f64).collect()
        })
        .collect()
}

pub fn dense_jaccard(a: &[f64], b: &[f64]) -> f64 {
    let mn: f64 = a.iter().zip(b).map(|(x, y)| x.min(*y)).sum();
    let mx: f64 = a.iter().zip(b).map(|(x, y)| x.max(*y)).sum();
    if mx == 0.0 {
        1.0
    } else {
        1.0 - mn / mx
    }
}

/// Dense `D` (queries x gallery) with queries and gallery pooled.
pub fn dense_kreciprocal(q: &Points, g: &Points, k1: usize, k2: usize, lambda_value: f64) -> Vec<Vec<f64>> {
    let mut all = q.clone();
    all.extend(g.iter().cloned());
    let s = dense_kreciprocal_structures(&all, k1, k2);
    let nq = q.len();
    (0..nq)
        .map(|i| {
            (0..g.len())
                .map(|j| {
                    let jac = dense_jaccard(&s.v_expanded[i], &s.v_expanded[nq + j]);
                    (1.0 - lambda_value) * jac + lambda_value * euclid(&q[i], &g[j])
                })
                .collect()
        })
        .collect()
}

/// Dense mutual-kNN affinity and its symmetric normalization.
pub fn dense_affinity(g: &Points, kd: usize, gamma: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = g.len();
    let nn: Vec<Vec<bool>> = (0..n).map(|i| mask_of(&full_ranking(&g[i], g, Some(i)), kd, n)).collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && nn[i][j] && nn[j][i] {
                a[i][j] = dot(&g[i], &g[j]).max(0.0).powf(gamma);
            }
        }
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>()).map(|d| if d > 0.0 { d } else { 1.0 }).collect();
    let s = (0..n).map(|i| (0..n).map(|j| a[i][j] / (deg[i].sqrt() * deg[j].sqrt())).collect()).collect();
    (a, s)
}

/// Direct LU solve of `(I - alpha S) f = y`.
pub fn dense_solve(s: &[Vec<f64>], y: &[f64], alpha: f64) -> Vec<f64> {
    let n = y.len();
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - alpha * s[i][j]);
    let f = m.lu().solve(&DVector::from_column_slice(y)).expect("nonsingular system");
    f.iter().copied().collect()
}

/// Eigenvalues of a dense symmetric matrix.
pub fn dense_sym_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mat = DMatrix::from_fn(n, n, |i, j| m[i][j]);
    let mut v: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Normwise gradient error `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`.
/// Zero when both vectors vanish.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Average-precision oracle written straight from the definition.
pub fn ap_oracle(relevance: &[bool], n_relevant: usize, k: usize, min_denominator: bool) -> f64 {
    if n_relevant == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k.min(relevance.len()) {
        if relevance[i] {
            let hits_so_far = relevance[..=i].iter().filter(|&&r| r).count();
            total += hits_so_far as f64 / (i + 1) as f64;
        }
    }
    let denom = if min_denominator { n_relevant.min(k) } else { n_relevant };
    total / denom as f64
}
