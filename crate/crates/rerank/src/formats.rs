//! On-disk formats. All binary integers and floats are little-endian.
//!
//! | file | layout |
//! |------|--------|
//! | FEAT | `FEAT`, u32 version, u64 rows, u32 dim, rows*dim f32; ids in `<path>.ids`, one per line |
//! | NBRT | `NBRT`, u32 version, u64 rows, u32 k, rows*k u32 indices, rows*k f32 sims |
//! | SPRW | `SPRW`, u32 version, u64 rows, u64 cols, (rows+1) u64 offsets, nnz (u32 column, f32 value) pairs |
//! | PCAM | `PCAM`, u32 version, u32 dim, u32 r, u8 whiten, dim f64 mean, r*dim f64 components, r f64 eigenvalues |

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rerank_core::aggregate::PcaModel;
use rerank_core::fusion::RankedResult;
use rerank_core::{FeatureMatrix, LabelMap, NeighborTable, SparseRowMatrix};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const SUBMISSION_HEADER: &str = "Id,Predicted";
pub const LABELS_HEADER: &str = "id,label";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sequential reader over a byte buffer that reports truncation against `path`.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(self.path, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic))));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("{what} {v} too large")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4], cap: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(cap);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out
}

/// Path of the id sidecar for a feature file.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = header(b"FEAT", 20 + m.data().len() * 4);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_ids(ids: &[String]) -> Vec<u8> {
    let mut out = String::with_capacity(ids.iter().map(|s| s.len() + 1).sum());
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    out.into_bytes()
}

fn check_id(id: &str, path: &Path) -> Result<()> {
    if id.is_empty() || id.contains(['\n', '\r']) {
        return Err(Error::format(path, format!("invalid id {id:?}")));
    }
    Ok(())
}

/// Writes a FEAT file and its id sidecar.
pub fn save_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    for id in m.ids() {
        check_id(id, path)?;
    }
    write(path, &encode_features(m))?;
    write(&ids_path(path), &encode_ids(m.ids()))
}

/// Reads an id list: one id per line, every line LF-terminated.
pub fn load_ids(path: &Path) -> Result<Vec<String>> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "ids are not UTF-8"))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').ok_or_else(|| Error::format(path, "last id line is not LF-terminated"))?;
    let ids: Vec<String> = body.split('\n').map(str::to_owned).collect();
    for id in &ids {
        check_id(id, path)?;
    }
    Ok(ids)
}

pub fn save_ids(ids: &[String], path: &Path) -> Result<()> {
    for id in ids {
        check_id(id, path)?;
    }
    write(path, &encode_ids(ids))
}

pub fn decode_features(bytes: &[u8], ids: Vec<String>, path: &Path) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes, path);
    r.magic(b"FEAT")?;
    let rows = r.count("rows")?;
    let dim = r.u32()? as usize;
    let n = rows.checked_mul(dim).ok_or_else(|| Error::format(path, "rows x dim overflows"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    if ids.len() != rows {
        return Err(Error::format(path, format!("{} ids for {rows} rows", ids.len())));
    }
    Ok(FeatureMatrix::new(dim, data, ids)?)
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let ids = load_ids(&ids_path(path))?;
    decode_features(&read(path)?, ids, path)
}

pub fn encode_neighbors(t: &NeighborTable) -> Vec<u8> {
    let mut out = header(b"NBRT", 20 + t.indices().len() * 8);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.k() as u32).to_le_bytes());
    for i in t.indices() {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for s in t.sims() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn save_neighbors(t: &NeighborTable, path: &Path) -> Result<()> {
    write(path, &encode_neighbors(t))
}

pub fn load_neighbors(path: &Path) -> Result<NeighborTable> {
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(b"NBRT")?;
    let rows = r.count("rows")?;
    let k = r.u32()? as usize;
    let n = rows.checked_mul(k).ok_or_else(|| Error::format(path, "rows x k overflows"))?;
    let indices = r.u32s(n)?;
    let sims = r.f32s(n)?;
    r.finish()?;
    Ok(NeighborTable::new(k, indices, sims)?)
}

pub fn encode_sparse(m: &SparseRowMatrix) -> Vec<u8> {
    let mut out = header(b"SPRW", 24 + m.offsets().len() * 8 + m.nnz() * 8);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for o in m.offsets() {
        out.extend_from_slice(&(*o as u64).to_le_bytes());
    }
    for (c, v) in m.indices().iter().zip(m.values()) {
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_sparse(m: &SparseRowMatrix, path: &Path) -> Result<()> {
    write(path, &encode_sparse(m))
}

pub fn load_sparse(path: &Path) -> Result<SparseRowMatrix> {
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(b"SPRW")?;
    let rows = r.count("rows")?;
    let cols = r.count("cols")?;
    let mut offsets = Vec::with_capacity(rows.min(bytes.len()) + 1);
    for _ in 0..=rows {
        offsets.push(r.count("offset")?);
    }
    let nnz = *offsets.last().unwrap();
    let pairs = r.take(nnz.checked_mul(8).ok_or_else(|| Error::format(path, "nnz overflows"))?)?;
    r.finish()?;
    let (mut indices, mut values) = (Vec::with_capacity(nnz), Vec::with_capacity(nnz));
    for p in pairs.chunks_exact(8) {
        indices.push(u32::from_le_bytes(p[..4].try_into().unwrap()));
        values.push(f32::from_le_bytes(p[4..].try_into().unwrap()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite score"));
    }
    Ok(SparseRowMatrix::from_parts(cols, offsets, indices, values)?)
}

pub fn encode_pca(m: &PcaModel) -> Vec<u8> {
    let mut out = header(b"PCAM", 17 + 8 * (m.mean().len() + m.components().len() + m.eigenvalues().len()));
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(m.out_dim() as u32).to_le_bytes());
    out.push(u8::from(m.whiten()));
    for v in m.mean().iter().chain(m.components()).chain(m.eigenvalues()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_pca(m: &PcaModel, path: &Path) -> Result<()> {
    write(path, &encode_pca(m))
}

pub fn load_pca(path: &Path) -> Result<PcaModel> {
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(b"PCAM")?;
    let dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let whiten = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::format(path, format!("whiten flag {b}"))),
    };
    let mean = r.f64s(dim)?;
    let components = r.f64s(out_dim.checked_mul(dim).ok_or_else(|| Error::format(path, "size overflow"))?)?;
    let eigenvalues = r.f64s(out_dim)?;
    r.finish()?;
    Ok(PcaModel::new(dim, mean, components, eigenvalues, whiten)?)
}

/// One submission line: a query and its ranked gallery ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionRow {
    pub query_id: String,
    pub gallery_ids: Vec<String>,
}

impl From<&RankedResult> for SubmissionRow {
    fn from(r: &RankedResult) -> Self {
        Self { query_id: r.query_id.clone(), gallery_ids: r.gallery_ids().map(str::to_owned).collect() }
    }
}

fn check_csv_field(id: &str, path: &Path) -> Result<()> {
    if id.is_empty() || id.contains([',', ' ', '\n', '\r']) {
        return Err(Error::format(path, format!("id {id:?} cannot be written to a submission")));
    }
    Ok(())
}

pub fn encode_submission(rows: &[SubmissionRow], path: &Path) -> Result<String> {
    let mut out = String::from(SUBMISSION_HEADER);
    out.push('\n');
    for row in rows {
        check_csv_field(&row.query_id, path)?;
        let mut seen = HashSet::with_capacity(row.gallery_ids.len());
        for g in &row.gallery_ids {
            check_csv_field(g, path)?;
            if !seen.insert(g.as_str()) {
                return Err(Error::format(path, format!("duplicate gallery id {g:?} for query {:?}", row.query_id)));
            }
        }
        out.push_str(&row.query_id);
        out.push(',');
        out.push_str(&row.gallery_ids.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_submission(rows: &[SubmissionRow], path: &Path) -> Result<()> {
    let text = encode_submission(rows, path)?;
    write(path, text.as_bytes())
}

pub fn write_submission(results: &[RankedResult], path: &Path) -> Result<()> {
    let rows: Vec<SubmissionRow> = results.iter().map(SubmissionRow::from).collect();
    save_submission(&rows, path)
}

fn lines<'a>(text: &'a str, path: &Path, header: &str) -> Result<std::str::Split<'a, char>> {
    let body = text.strip_suffix('\n').ok_or_else(|| Error::format(path, "missing final LF"))?;
    let mut it = body.split('\n');
    if it.next() != Some(header) {
        return Err(Error::format(path, format!("expected header {header:?}")));
    }
    Ok(it)
}

pub fn load_submission(path: &Path) -> Result<Vec<SubmissionRow>> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let rows = lines(&text, path, SUBMISSION_HEADER)?
        .enumerate()
        .map(|(i, line)| {
            let (q, rest) = line.split_once(',').ok_or_else(|| Error::format(path, format!("line {}: missing comma", i + 2)))?;
            let gallery_ids = if rest.is_empty() { Vec::new() } else { rest.split(' ').map(str::to_owned).collect() };
            Ok(SubmissionRow { query_id: q.to_owned(), gallery_ids })
        })
        .collect::<Result<Vec<_>>>()?;
    // re-encoding validates ids, duplicates and spacing
    if encode_submission(&rows, path)? != text {
        return Err(Error::format(path, "submission is not in canonical form"));
    }
    Ok(rows)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let text = if text.ends_with('\n') { text } else { text + "\n" };
    let mut map = LabelMap::new();
    for (i, line) in lines(&text, path, LABELS_HEADER)?.enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (id, label) = line.split_once(',').ok_or_else(|| Error::format(path, format!("line {}: expected id,label", i + 2)))?;
        map.insert(id.to_owned(), label.to_owned()).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
    }
    Ok(map)
}

pub fn save_labels<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>, path: &Path) -> Result<()> {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for (id, label) in entries {
        if id.contains([',', '\n']) || label.contains('\n') {
            return Err(Error::format(path, format!("label entry {id:?} not representable")));
        }
        out.push_str(id);
        out.push(',');
        out.push_str(label);
        out.push('\n');
    }
    write(path, out.as_bytes())
}

/// Per-query AP table: `query_id,ap`.
pub fn save_per_query_ap(rows: &[(String, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("query_id,ap\n");
    for (q, ap) in rows {
        out.push_str(&format!("{q},{ap}\n"));
    }
    write(path, out.as_bytes())
}

/// Plain-text export: one row per line, `id,v0,v1,...`. Values use the
/// shortest representation that parses back to the same `f32`.
pub fn features_to_csv(m: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        if m.ids()[i].contains([',', '\n']) {
            return Err(Error::format(path, format!("id {:?} not representable in CSV", m.ids()[i])));
        }
        out.push_str(&m.ids()[i]);
        for v in m.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write(path, out.as_bytes())
}

pub fn features_from_csv(path: &Path) -> Result<FeatureMatrix> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut dim = None;
    let (mut ids, mut data) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let mut fields = line.split(',');
        ids.push(fields.next().unwrap_or_default().to_owned());
        let before = data.len();
        for f in fields {
            data.push(f.trim().parse::<f32>().map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
        }
        let d = data.len() - before;
        if *dim.get_or_insert(d) != d {
            return Err(Error::format(path, format!("line {}: {d} values, expected {}", i + 1, dim.unwrap())));
        }
    }
    let dim = dim.ok_or_else(|| Error::format(path, "no rows"))?;
    Ok(FeatureMatrix::new(dim, data, ids)?)
}
