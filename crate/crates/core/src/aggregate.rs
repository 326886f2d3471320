//! Feature-space aggregation: test-time-augmentation view averaging, model
//! ensembling, and the PCA / DBA / AQE post-processors.
//!
//! All outputs are L2-normalized. Sums are accumulated in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{normalize_into, FeatureMatrix, NeighborTable};
use crate::{linalg, math, par, Error, Result};

/// Orders inputs by their raw bit content so that any permutation of the
/// same list accumulates in the same order.
fn canonical_order(mats: &[FeatureMatrix]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mats.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (mats[a].data(), mats[b].data());
        da.iter()
            .map(|v| v.to_bits())
            .cmp(db.iter().map(|v| v.to_bits()))
            .then(a.cmp(&b))
    });
    order
}

fn check_layouts(mats: &[FeatureMatrix]) -> Result<&FeatureMatrix> {
    let first = mats.first().ok_or_else(|| Error::Shape("no input matrices".into()))?;
    for m in &mats[1..] {
        first.check_same_layout(m)?;
    }
    Ok(first)
}

/// Element-wise sum (optionally scaled by `1/k`) followed by L2 normalization.
fn combine(mats: &[FeatureMatrix], mean: bool) -> Result<FeatureMatrix> {
    let first = check_layouts(mats)?;
    let order = canonical_order(mats);
    let dim = first.dim();
    let scale = if mean { 1.0 / mats.len() as f64 } else { 1.0 };
    let rows = par::try_map_range(first.rows(), |i| {
        let mut acc = vec![0.0f64; dim];
        for &m in &order {
            for (a, v) in acc.iter_mut().zip(mats[m].row(i)) {
                *a += f64::from(*v);
            }
        }
        if mean {
            acc.iter_mut().for_each(|a| *a *= scale);
        }
        let mut out = vec![0.0f32; dim];
        normalize_into(&acc, i, &mut out)?;
        Ok(out)
    })?;
    Ok(first.with_data(rows.concat()))
}

/// Mean of per-view features followed by L2 normalization.
///
/// All views must describe the same images in the same order.
pub fn tta_aggregate(views: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    combine(views, true)
}

/// Sum of per-model features followed by L2 normalization.
pub fn ensemble_features(models: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    combine(models, false)
}

/// Fitted principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    dim: usize,
    mean: Vec<f64>,
    /// `r x dim`, orthonormal rows.
    components: Vec<f64>,
    eigenvalues: Vec<f64>,
    whiten: bool,
}

/// Added to each eigenvalue before whitening.
pub const WHITEN_EPS: f64 = 1e-12;

impl PcaModel {
    /// Reassembles a model, checking orthonormality and eigenvalue ordering.
    pub fn new(dim: usize, mean: Vec<f64>, components: Vec<f64>, eigenvalues: Vec<f64>, whiten: bool) -> Result<Self> {
        let r = eigenvalues.len();
        if mean.len() != dim || components.len() != r * dim {
            return Err(Error::Shape(format!("pca model: dim {dim}, r {r}, {} component values", components.len())));
        }
        if eigenvalues.iter().any(|e| !(*e > 0.0)) || eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Data("pca eigenvalues must be positive and non-increasing".into()));
        }
        for a in 0..r {
            for b in a..r {
                let d = math::dot_f64(&components[a * dim..(a + 1) * dim], &components[b * dim..(b + 1) * dim]);
                let target = if a == b { 1.0 } else { 0.0 };
                if (d - target).abs() > 1e-5 {
                    return Err(Error::Data(format!("pca components {a},{b} not orthonormal ({d})")));
                }
            }
        }
        Ok(Self { dim, mean, components, eigenvalues, whiten })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn out_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }
}

/// Relative eigenvalue floor below which a direction counts as numerically absent.
const RANK_TOL: f64 = 1e-10;

/// Fits PCA on `g` (sample covariance, `n - 1` denominator), keeping `r` components.
pub fn pca_fit(g: &FeatureMatrix, r: usize, whiten: bool) -> Result<PcaModel> {
    let (n, d) = (g.rows(), g.dim());
    if n < 2 {
        return Err(Error::Param(format!("pca needs at least 2 rows, got {n}")));
    }
    if r == 0 || r > n.min(d) {
        return Err(Error::Param(format!("pca target dim {r} must be in 1..={}", n.min(d))));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(g.row(i)) {
            *m += f64::from(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for i in 0..n {
        for (c, (v, m)) in centered.iter_mut().zip(g.row(i).iter().zip(&mean)) {
            *c = f64::from(*v) - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    let (vals, vecs) = linalg::symmetric_eigen(&cov, d)?;
    let top = vals[0].max(0.0);
    if !(vals[r - 1] > RANK_TOL * top) || top == 0.0 {
        return Err(Error::Numeric(format!(
            "target dim {r} exceeds numerical rank (eigenvalue {} vs largest {top})",
            vals[r - 1]
        )));
    }
    PcaModel::new(d, mean, vecs[..r * d].to_vec(), vals[..r].to_vec(), whiten)
}

/// Centers, projects, optionally whitens, then L2-normalizes every row.
pub fn pca_transform(m: &FeatureMatrix, model: &PcaModel) -> Result<FeatureMatrix> {
    if m.dim() != model.dim {
        return Err(Error::Shape(format!("pca model dim {} vs features {}", model.dim, m.dim())));
    }
    let r = model.out_dim();
    let rows = par::try_map_range(m.rows(), |i| {
        let centered: Vec<f64> = m.row(i).iter().zip(&model.mean).map(|(v, mu)| f64::from(*v) - mu).collect();
        let mut proj: Vec<f64> = (0..r).map(|c| math::dot_f64(&centered, model.component(c))).collect();
        if model.whiten {
            for (p, e) in proj.iter_mut().zip(&model.eigenvalues) {
                *p /= math::sqrt(e + WHITEN_EPS);
            }
        }
        let mut out = vec![0.0f32; r];
        normalize_into(&proj, i, &mut out)?;
        Ok(out)
    })?;
    FeatureMatrix::new(r, rows.concat(), m.ids().to_vec())
}

/// Neighbor weighting for database-side augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DbaWeights {
    /// Neighbor at rank `i` (0-based) gets `(k - i) / k`.
    #[default]
    Linear,
    /// Every neighbor gets weight 1.
    Uniform,
}

fn check_width(nbrs: &NeighborTable, rows: usize, k: usize) -> Result<()> {
    if k > nbrs.k() && k > 0 {
        return Err(Error::Param(format!("k={k} exceeds neighbor table width {}", nbrs.k())));
    }
    if k > 0 && nbrs.rows() != rows {
        return Err(Error::Shape(format!("neighbor table has {} rows, features {rows}", nbrs.rows())));
    }
    Ok(())
}

/// Replaces each gallery row with itself plus a weighted sum of its top-`k`
/// neighbors (from a self-excluded table over `g`), then L2-normalizes.
pub fn dba_augment(g: &FeatureMatrix, nbrs: &NeighborTable, k: usize, weights: DbaWeights) -> Result<FeatureMatrix> {
    check_width(nbrs, g.rows(), k)?;
    let dim = g.dim();
    let rows = par::try_map_range(g.rows(), |i| {
        let mut acc: Vec<f64> = g.row(i).iter().map(|v| f64::from(*v)).collect();
        if k > 0 {
            for (rank, &j) in nbrs.row_indices(i)[..k].iter().enumerate() {
                let w = match weights {
                    DbaWeights::Linear => (k - rank) as f64 / k as f64,
                    DbaWeights::Uniform => 1.0,
                };
                for (a, v) in acc.iter_mut().zip(g.row(j as usize)) {
                    *a += w * f64::from(*v);
                }
            }
        }
        let mut out = vec![0.0f32; dim];
        normalize_into(&acc, i, &mut out)?;
        Ok(out)
    })?;
    Ok(g.with_data(rows.concat()))
}

/// Replaces each query with the mean of itself and its top-`k` gallery
/// neighbors, then L2-normalizes.
pub fn aqe_expand(q: &FeatureMatrix, g: &FeatureMatrix, nbrs: &NeighborTable, k: usize) -> Result<FeatureMatrix> {
    check_width(nbrs, q.rows(), k)?;
    if q.dim() != g.dim() {
        return Err(Error::Shape(format!("query dim {} vs gallery dim {}", q.dim(), g.dim())));
    }
    let dim = q.dim();
    let rows = par::try_map_range(q.rows(), |i| {
        let mut acc: Vec<f64> = q.row(i).iter().map(|v| f64::from(*v)).collect();
        if k > 0 {
            for &j in &nbrs.row_indices(i)[..k] {
                for (a, v) in acc.iter_mut().zip(g.row(j as usize)) {
                    *a += f64::from(*v);
                }
            }
        }
        let inv = 1.0 / (k + 1) as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        let mut out = vec![0.0f32; dim];
        normalize_into(&acc, i, &mut out)?;
        Ok(out)
    })?;
    Ok(q.with_data(rows.concat()))
}
