//! In-memory embedding matrix keyed by chunk id.
//!
//! The store is immutable once built. Rows are L2-normalized `f32` vectors
//! laid out contiguously (row-major), so scoring a candidate set against a
//! query is one pass over memory.
//!
//! # Sidecar format
//!
//! ```text
//! magic   "PEM1"            4 bytes
//! version u32 LE            currently 1
//! dim     u32 LE
//! count   u64 LE
//! rows    count * dim f32 LE
//! ids     count lines, each terminated by '\n'
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rustc_hash::FxHashMap;
use thiserror::Error;

pub const SIDECAR_MAGIC: &[u8; 4] = b"PEM1";
pub const SIDECAR_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Rows whose norm deviates from 1.0 by more than this are renormalized at load.
pub const NORM_TOLERANCE: f32 = 1e-4;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimensionality mismatch for id {id:?}: expected {expected}, got {actual}")]
    DimMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("zero vector for id {0:?} cannot be normalized")]
    ZeroVector(String),
    #[error("non-finite value in vector for id {0:?}")]
    NonFinite(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("corrupt sidecar at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("id {0:?} is not in the embedding store")]
    UnknownId(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Summary of what `load` had to fix up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    pub renormalized: usize,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    id_index: FxHashMap<String, usize>,
    /// Epoch seconds per row; `None` when the timestamp is unknown.
    timestamps: Vec<Option<f64>>,
}

impl EmbeddingStore {
    /// Builds a store from `(id, vector)` pairs, normalizing rows as needed.
    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<(Self, LoadReport), StoreError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let rows = rows.into_iter();
        let mut ids = Vec::with_capacity(rows.size_hint().0);
        let mut matrix = Vec::with_capacity(rows.size_hint().0 * dim);
        let mut report = LoadReport::default();
        for (id, mut v) in rows {
            let id = id.into();
            if v.len() != dim {
                return Err(StoreError::DimMismatch {
                    id,
                    expected: dim,
                    actual: v.len(),
                });
            }
            if normalize_row(&id, &mut v)? {
                report.renormalized += 1;
            }
            matrix.extend_from_slice(&v);
            ids.push(id);
        }
        report.rows = ids.len();
        let store = Self::assemble(dim, ids, matrix)?;
        Ok((store, report))
    }

    fn assemble(dim: usize, ids: Vec<String>, matrix: Vec<f32>) -> Result<Self, StoreError> {
        let mut id_index = FxHashMap::with_capacity_and_hasher(ids.len(), Default::default());
        for (i, id) in ids.iter().enumerate() {
            if id_index.insert(id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        let timestamps = vec![None; ids.len()];
        Ok(Self {
            dim,
            ids,
            matrix,
            id_index,
            timestamps,
        })
    }

    pub fn empty(dim: usize) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        Self::assemble(dim, Vec::new(), Vec::new())
    }

    /// Attaches per-chunk timestamps (epoch seconds). Ids not present in the
    /// store are ignored; rows with no entry keep an unknown timestamp.
    pub fn with_timestamps<'a, I>(mut self, stamps: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        for (id, ts) in stamps {
            if let Some(&row) = self.id_index.get(id) {
                self.timestamps[row] = ts.is_finite().then_some(ts);
            }
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// The raw row-major matrix.
    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    /// Bytes held by the matrix alone, `len * dim * 4`.
    pub fn matrix_bytes(&self) -> usize {
        std::mem::size_of_val(self.matrix.as_slice())
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.index_of(id).map(|i| self.row(i))
    }

    pub fn timestamp(&self, index: usize) -> Option<f64> {
        self.timestamps[index]
    }

    /// Projects the store onto `ids`, preserving the iteration order of the
    /// input. Unknown ids are dropped and counted; repeated ids keep their
    /// first position. Ages are fractional days before `now` (epoch seconds),
    /// clamped at zero.
    pub fn subset<'a, I, S>(&'a self, ids: I, now: f64) -> CandidateView<'a>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        // One bit per store row marks rows already taken.
        let mut seen = vec![0u64; self.len().div_ceil(64)];
        let mut rows = Vec::new();
        let mut dropped = 0;
        for id in ids {
            match self.id_index.get(id.as_ref()) {
                Some(&row) => {
                    let (word, bit) = (row / 64, 1u64 << (row % 64));
                    if seen[word] & bit == 0 {
                        seen[word] |= bit;
                        rows.push(row);
                    }
                }
                None => dropped += 1,
            }
        }
        self.view_of_rows(rows, dropped, now)
    }

    /// View over every row, in store order.
    pub fn full_view(&self, now: f64) -> CandidateView<'_> {
        self.view_of_rows((0..self.len()).collect(), 0, now)
    }

    fn view_of_rows(&self, rows: Vec<usize>, dropped: usize, now: f64) -> CandidateView<'_> {
        let ages_days = rows
            .iter()
            .map(|&r| match self.timestamps[r] {
                Some(ts) => ((now - ts) / SECONDS_PER_DAY).max(0.0) as f32,
                None => 0.0,
            })
            .collect();
        CandidateView {
            store: self,
            rows,
            ages_days,
            dropped,
        }
    }

    /// Serializes to the sidecar format.
    pub fn to_sidecar_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|s| s.len() + 1).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + self.matrix.len() * 4 + id_bytes);
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for x in &self.matrix {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_sidecar_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Parses sidecar bytes. Rows off unit norm by more than
    /// [`NORM_TOLERANCE`] are renormalized and counted.
    pub fn from_sidecar_bytes(bytes: &[u8]) -> Result<(Self, LoadReport), StoreError> {
        let corrupt = |offset: usize, reason: &str| StoreError::Corrupt {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != SIDECAR_MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SIDECAR_VERSION {
            return Err(corrupt(4, &format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(corrupt(8, "zero dimension"));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(12, "row count overflows"))?;
        let body_end = HEADER_LEN
            .checked_add(body_len)
            .ok_or_else(|| corrupt(12, "row count overflows"))?;
        if bytes.len() < body_end {
            // Report the offset of the first row that does not fit.
            let whole_rows = (bytes.len() - HEADER_LEN) / (dim * 4);
            return Err(corrupt(
                HEADER_LEN + whole_rows * dim * 4,
                "short vector payload",
            ));
        }
        let mut matrix: Vec<f32> = bytes[HEADER_LEN..body_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut ids = Vec::with_capacity(count);
        let mut offset = body_end;
        for _ in 0..count {
            let rest = &bytes[offset..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt(offset, "missing id terminator"))?;
            let id = std::str::from_utf8(&rest[..nl])
                .map_err(|_| corrupt(offset, "id is not valid utf-8"))?;
            ids.push(id.to_string());
            offset += nl + 1;
        }
        if offset != bytes.len() {
            return Err(corrupt(offset, "trailing bytes after id list"));
        }

        let mut report = LoadReport {
            rows: count,
            renormalized: 0,
        };
        for (id, row) in ids.iter().zip(matrix.chunks_exact_mut(dim)) {
            if normalize_row(id, row)? {
                report.renormalized += 1;
            }
        }
        Ok((Self::assemble(dim, ids, matrix)?, report))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, LoadReport), StoreError> {
        let bytes = fs::read(path)?;
        Self::from_sidecar_bytes(&bytes)
    }

    /// Returns a new store with `rows` appended. Existing ids are skipped and
    /// reported in the second tuple element.
    pub fn appended<I>(&self, rows: I) -> Result<(Self, usize), StoreError>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut ids = self.ids.clone();
        let mut matrix = self.matrix.clone();
        let mut seen: HashSet<String> = HashSet::new();
        let mut skipped = 0;
        for (id, mut v) in rows {
            if self.id_index.contains_key(&id) || !seen.insert(id.clone()) {
                skipped += 1;
                continue;
            }
            if v.len() != self.dim {
                return Err(StoreError::DimMismatch {
                    id,
                    expected: self.dim,
                    actual: v.len(),
                });
            }
            normalize_row(&id, &mut v)?;
            matrix.extend_from_slice(&v);
            ids.push(id);
        }
        let mut store = Self::assemble(self.dim, ids, matrix)?;
        store.timestamps[..self.timestamps.len()].copy_from_slice(&self.timestamps);
        Ok((store, skipped))
    }
}

/// Normalizes in place. Returns whether the row needed rescaling.
fn normalize_row(id: &str, v: &mut [f32]) -> Result<bool, StoreError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::NonFinite(id.to_string()));
    }
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(StoreError::ZeroVector(id.to_string()));
    }
    if (norm - 1.0).abs() <= f64::from(NORM_TOLERANCE) {
        return Ok(false);
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(true)
}

/// Read-only projection of the store onto a candidate id set.
#[derive(Debug, Clone)]
pub struct CandidateView<'a> {
    store: &'a EmbeddingStore,
    rows: Vec<usize>,
    ages_days: Vec<f32>,
    dropped: usize,
}

impl<'a> CandidateView<'a> {
    pub fn store(&self) -> &'a EmbeddingStore {
        self.store
    }

    pub fn dim(&self) -> usize {
        self.store.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// True when no candidate survived the projection. Scoring an empty view
    /// yields an empty result rather than an error.
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of requested ids that were not in the store.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        self.store.row(self.rows[i])
    }

    pub fn id(&self, i: usize) -> &'a str {
        &self.store.ids[self.rows[i]]
    }

    pub fn ids(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.rows.iter().map(|&r| self.store.ids[r].as_str())
    }

    pub fn store_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn ages_days(&self) -> &[f32] {
        &self.ages_days
    }

    /// True when the view covers the whole store in store order, which lets
    /// scoring walk the matrix contiguously.
    pub fn is_contiguous_full(&self) -> bool {
        self.rows.len() == self.store.len() && self.rows.iter().enumerate().all(|(i, &r)| i == r)
    }
}
