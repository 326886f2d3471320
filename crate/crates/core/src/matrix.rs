//! Core data containers shared by every stage.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Rows whose squared norm is this close to 1 are left untouched by
/// [`FeatureMatrix::l2_normalize`], which makes normalization idempotent bit
/// for bit on `f32` storage.
const UNIT_NORM_SQ_TOL: f64 = 4.0 * f32::EPSILON as f64;

/// Rows with an L2 norm below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Dense row-major embedding matrix with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl FeatureMatrix {
    /// Validates and wraps a row-major buffer.
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} rows x {} dims",
                data.len(),
                ids.len(),
                dim
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let row = pos.checked_div(dim).unwrap_or(0);
            return Err(Error::Data(format!("non-finite value in row {row}")));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { dim, data, ids })
    }

    /// Builds a matrix from `f64` rows, rounding to `f32`.
    pub fn from_rows_f64(rows: &[Vec<f64>], ids: Vec<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!("row {i} has {} values, expected {dim}", r.len())));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(dim, data, ids)
    }

    /// Empty matrix with a fixed dimension.
    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new(), ids: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn into_parts(self) -> (usize, Vec<f32>, Vec<String>) {
        (self.dim, self.data, self.ids)
    }

    /// Returns a copy with the same IDs and new values. Caller keeps `data` finite.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { dim: self.dim, data, ids: self.ids.clone() }
    }

    /// Checks that `other` has the same row count, dimension and ID order.
    pub fn check_same_layout(&self, other: &FeatureMatrix) -> Result<()> {
        if self.dim != other.dim || self.rows() != other.rows() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows(),
                self.dim,
                other.rows(),
                other.dim
            )));
        }
        if self.ids != other.ids {
            return Err(Error::Shape(String::from("id lists differ")));
        }
        Ok(())
    }

    /// Scales every row to unit L2 norm.
    ///
    /// Rows that are already unit length within `f32` precision are copied
    /// unchanged. A row with norm below [`ZERO_NORM`] is an error naming it.
    pub fn l2_normalize(&self) -> Result<FeatureMatrix> {
        let mut out = self.data.clone();
        for i in 0..self.rows() {
            let row = &mut out[i * self.dim..(i + 1) * self.dim];
            let sq: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            let norm = math::sqrt(sq);
            if norm < ZERO_NORM {
                return Err(Error::ZeroRow { row: i });
            }
            if (sq - 1.0).abs() <= UNIT_NORM_SQ_TOL {
                continue;
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(self.with_data(out))
    }
}

/// Normalizes an `f64` accumulator row into `f32`, failing on a zero row.
pub(crate) fn normalize_into(acc: &[f64], row: usize, out: &mut [f32]) -> Result<()> {
    let norm = math::sqrt(acc.iter().map(|v| v * v).sum());
    if norm < ZERO_NORM {
        return Err(Error::ZeroRow { row });
    }
    for (o, v) in out.iter_mut().zip(acc) {
        *o = (v / norm) as f32;
    }
    Ok(())
}

/// Per-row top-k neighbors: positions into a target set and their cosine
/// similarities, sorted by descending similarity (ties by lower index).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<u32>,
    sims: Vec<f32>,
}

impl NeighborTable {
    pub fn new(k: usize, indices: Vec<u32>, sims: Vec<f32>) -> Result<Self> {
        if indices.len() != sims.len() || (k == 0 && !indices.is_empty()) || (k > 0 && !indices.len().is_multiple_of(k)) {
            return Err(Error::Shape(format!(
                "neighbor table with k={k}: {} indices, {} sims",
                indices.len(),
                sims.len()
            )));
        }
        Ok(Self { k, indices, sims })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn sims(&self) -> &[f32] {
        &self.sims
    }

    #[inline]
    pub fn row_indices(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn row_sims(&self, i: usize) -> &[f32] {
        &self.sims[i * self.k..(i + 1) * self.k]
    }
}

/// Compressed sparse rows with strictly increasing column indices per row.
///
/// `SparseRowMatrix` (the `f32` instance) carries the query x gallery score
/// matrices `S`, `D` and their fusion; the `f64` instance backs affinity
/// graphs and reciprocal encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr<T> {
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
}

pub type SparseRowMatrix = Csr<f32>;

impl<T: Copy> Csr<T> {
    pub fn new(cols: usize) -> Self {
        Self { cols, offsets: alloc::vec![0], indices: Vec::new(), values: Vec::new() }
    }

    /// Assembles from raw parts, checking offsets and column ordering.
    pub fn from_parts(cols: usize, offsets: Vec<usize>, indices: Vec<u32>, values: Vec<T>) -> Result<Self> {
        if offsets.first() != Some(&0)
            || *offsets.last().unwrap_or(&0) != indices.len()
            || indices.len() != values.len()
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Shape(String::from("inconsistent sparse row offsets")));
        }
        for r in 0..offsets.len() - 1 {
            let row = &indices[offsets[r]..offsets[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c as usize >= cols) {
                return Err(Error::Data(format!("row {r} has unsorted or out-of-range columns")));
            }
        }
        Ok(Self { cols, offsets, indices, values })
    }

    /// Builds from per-row entry lists; each list must already be sorted by column.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(u32, T)>>) -> Result<Self> {
        let mut m = Self::new(cols);
        for r in rows {
            m.push_row(&r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, entries: &[(u32, T)]) -> Result<()> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Data(format!("row {} columns not strictly increasing", self.rows())));
        }
        if let Some(&(c, _)) = entries.last() {
            if c as usize >= self.cols {
                return Err(Error::Shape(format!("column {c} out of range for {} columns", self.cols)));
            }
        }
        for &(c, v) in entries {
            self.indices.push(c);
            self.values.push(v);
        }
        self.offsets.push(self.indices.len());
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[T]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Value at `(r, c)` if stored.
    pub fn get(&self, r: usize, c: u32) -> Option<T> {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).ok().map(|p| vals[p])
    }
}

impl Csr<f64> {
    /// `out = self * x`, rows accumulated in column order.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows()) {
            let (idx, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in idx.iter().zip(vals) {
                acc += v * x[*c as usize];
            }
            *o = acc;
        }
    }
}

/// Identifier to class-label lookup used as relevance ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelMap {
    entries: BTreeMap<String, String>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; a repeated ID is an error.
    pub fn insert(&mut self, id: String, label: String) -> Result<()> {
        if self.entries.contains_key(&id) {
            return Err(Error::Data(format!("duplicate label row for {id:?}")));
        }
        self.entries.insert(id, label);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&str> {
        self.entries
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("no label for id {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
