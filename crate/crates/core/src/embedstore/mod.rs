//! Embedding stores, triplet datasets, and the dataset tooling built on them.
//!
//! Store file layout (all integers little-endian):
//!
//! ```text
//! "FIGE" | version u32 = 1 | count u64 | dim u32 | flags u8 | 3 zero bytes
//! count * dim f32 (row-major)
//! count * (u16 byte length, UTF-8 id)
//! ```
//!
//! Bit 0 of `flags` marks a normalized store.

mod tooling;
mod triplets;

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diffcore::Tensor;

pub use tooling::{clip_filter, dataset_stats, read_scored_pairs, write_scored_pairs, DatasetStats, ScoredPair, TaskStats};
pub use triplets::{load_triplets, parse_triplets, write_triplets, Task, TripletRecord};

pub const MAGIC: &[u8; 4] = b"FIGE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1 + 3;
const FLAG_NORMALIZED: u8 = 1;

/// Id of the empty-prompt text embedding used for image-only queries and for
/// the reference-as-negative branch of the triplet loss.
pub const EMPTY_TEXT_ID: &str = "__EMPTY__";

/// Row norms of a normalized store must be within this of 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("row {row} ({id:?}) contains a non-finite value")]
    NonFinite { row: usize, id: String },
    #[error("row {row} ({id:?}) has norm {norm}, expected 1 for a normalized store")]
    NotUnitNorm { row: usize, id: String, norm: f64 },
    #[error("row {row} ({id:?}) is a zero vector")]
    ZeroVector { row: usize, id: String },
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("{rows} ids but {values} values for dim {dim}")]
    ShapeMismatch { rows: usize, values: usize, dim: usize },
    #[error("id {0:?} is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("manifest has {found} entries, header says {expected}")]
    ManifestCount { expected: u64, found: u64 },
    #[error("manifest id is not valid UTF-8 at entry {0}")]
    InvalidUtf8(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Triplet {
        path: String,
        line: usize,
        message: String,
    },
    #[error("threshold {0} outside [-1, 1]")]
    Threshold(f64),
    #[error("pair {index} has score {score} outside [-1, 1]")]
    ScoreRange { index: usize, score: f64 },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Immutable id → vector map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    normalized: bool,
    ids: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// Validates and builds a store from row-major `vectors`.
    pub fn new(ids: Vec<String>, vectors: Vec<f32>, dim: usize, normalized: bool) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if vectors.len() != ids.len() * dim {
            return Err(StoreError::ShapeMismatch {
                rows: ids.len(),
                values: vectors.len(),
                dim,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id.len() > u16::MAX as usize {
                return Err(StoreError::IdTooLong(id.clone()));
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
            let v = &vectors[row * dim..(row + 1) * dim];
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { row, id: id.clone() });
            }
            let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if norm == 0.0 && (normalized || id == EMPTY_TEXT_ID) {
                return Err(StoreError::ZeroVector { row, id: id.clone() });
            }
            if normalized && (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(StoreError::NotUnitNorm {
                    row,
                    id: id.clone(),
                    norm,
                });
            }
        }
        Ok(Self {
            dim,
            normalized,
            ids,
            vectors,
            index,
        })
    }

    /// Builds a normalized store from arbitrary finite rows.
    pub fn from_unnormalized(ids: Vec<String>, mut vectors: Vec<f32>, dim: usize) -> Result<Self, StoreError> {
        if dim > 0 {
            for row in vectors.chunks_mut(dim) {
                let norm = row.iter().map(|&x| x * x).sum::<f32>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
            }
        }
        Self::new(ids, vectors, dim, true)
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

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn lookup(&self, id: &str) -> Result<&[f32], StoreError> {
        self.index_of(id)
            .map(|r| self.row(r))
            .ok_or_else(|| StoreError::UnknownId(id.to_string()))
    }

    /// Copies the given rows into a `rows.len() x dim` tensor.
    pub fn gather(&self, rows: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor::matrix(rows.len(), self.dim, data).expect("non-empty gather")
    }

    /// Returns a new store with `extra` rows appended.
    pub fn extended(&self, extra_ids: Vec<String>, extra_vectors: &[f32]) -> Result<Self, StoreError> {
        let mut ids = self.ids.clone();
        ids.extend(extra_ids);
        let mut vectors = self.vectors.clone();
        vectors.extend_from_slice(extra_vectors);
        Self::new(ids, vectors, self.dim, self.normalized)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest: usize = self.ids.iter().map(|id| 2 + id.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + self.vectors.len() * 4 + manifest);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(if self.normalized { FLAG_NORMALIZED } else { 0 });
        out.extend_from_slice(&[0, 0, 0]);
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        let count = cur.u64()?;
        let dim = cur.u32()? as usize;
        let flags = cur.take(1)?[0];
        if cur.take(3)? != [0, 0, 0] {
            return Err(StoreError::Header("reserved bytes must be zero"));
        }
        if flags & !FLAG_NORMALIZED != 0 {
            return Err(StoreError::Header("unknown flag bits"));
        }
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let values = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .ok_or(StoreError::Header("count * dim overflows"))?;
        let payload = cur.take(values.checked_mul(4).ok_or(StoreError::Header("payload size overflows"))?)?;
        let vectors: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut ids = Vec::with_capacity(count as usize);
        while (ids.len() as u64) < count {
            if cur.remaining() == 0 {
                return Err(StoreError::ManifestCount {
                    expected: count,
                    found: ids.len() as u64,
                });
            }
            let len = cur.u16()? as usize;
            let raw = cur.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|_| StoreError::InvalidUtf8(ids.len()))?;
            ids.push(id.to_string());
        }
        if cur.remaining() > 0 {
            // count the surplus entries for the error message
            let mut found = count;
            while cur.remaining() > 0 {
                let len = cur.u16()? as usize;
                cur.take(len)?;
                found += 1;
            }
            return Err(StoreError::ManifestCount { expected: count, found });
        }
        Self::new(ids, vectors, dim, flags & FLAG_NORMALIZED != 0)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.remaining() < n {
            return Err(StoreError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Validates the inputs and writes a store file.
pub fn write_store(
    path: impl AsRef<Path>,
    ids: Vec<String>,
    vectors: Vec<f32>,
    dim: usize,
    normalized: bool,
) -> Result<EmbeddingStore, StoreError> {
    let store = EmbeddingStore::new(ids, vectors, dim, normalized)?;
    save_store(&store, path)?;
    Ok(store)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&store.to_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| StoreError::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_store_is_header_only() {
        let store = EmbeddingStore::new(Vec::new(), Vec::new(), 4, true).unwrap();
        let bytes = store.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn single_row_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.fige");
        write_store(&path, ids(&["a"]), vec![1.0, 0.0, 0.0, 0.0], 4, true).unwrap();
        let back = read_store(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.dim(), 4);
        assert!(back.is_normalized());
        assert_eq!(back.lookup("a").unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn header_layout_is_exact() {
        let store = EmbeddingStore::new(ids(&["ab"]), vec![0.5, -0.25], 2, false).unwrap();
        let b = store.to_bytes();
        assert_eq!(&b[0..4], b"FIGE");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(b[20], 0);
        assert_eq!(&b[21..24], &[0, 0, 0]);
        assert_eq!(&b[24..28], &0.5f32.to_le_bytes());
        assert_eq!(&b[28..32], &(-0.25f32).to_le_bytes());
        assert_eq!(&b[32..34], &2u16.to_le_bytes());
        assert_eq!(&b[34..], b"ab");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = EmbeddingStore::new(ids(&["a", "a"]), vec![1.0, 0.0, 0.0, 1.0], 2, true).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateId(ref id) if id == "a"));
    }

    #[test]
    fn non_finite_rejected() {
        let err = EmbeddingStore::new(ids(&["a"]), vec![f32::NAN, 0.0], 2, false).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite { row: 0, .. }));
        let err = EmbeddingStore::new(ids(&["a"]), vec![f32::INFINITY, 0.0], 2, false).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite { .. }));
    }

    #[test]
    fn normalized_flag_is_checked() {
        let err = EmbeddingStore::new(ids(&["a"]), vec![2.0, 0.0], 2, true).unwrap_err();
        assert!(matches!(err, StoreError::NotUnitNorm { .. }));
        assert!(EmbeddingStore::new(ids(&["a"]), vec![2.0, 0.0], 2, false).is_ok());
    }

    #[test]
    fn zero_empty_text_vector_rejected() {
        let err = EmbeddingStore::new(ids(&[EMPTY_TEXT_ID]), vec![0.0, 0.0], 2, false).unwrap_err();
        assert!(matches!(err, StoreError::ZeroVector { .. }));
    }

    #[test]
    fn lookup_fails_for_unknown_id() {
        let store = EmbeddingStore::new(ids(&["a"]), vec![1.0, 0.0], 2, true).unwrap();
        assert!(matches!(store.lookup("b"), Err(StoreError::UnknownId(_))));
    }

    #[test]
    fn truncated_payload_detected() {
        let store = EmbeddingStore::new(ids(&["a", "b"]), vec![1.0, 0.0, 0.0, 1.0], 2, true).unwrap();
        let bytes = store.to_bytes();
        let err = EmbeddingStore::from_bytes(&bytes[..HEADER_LEN + 6]).unwrap_err();
        assert!(matches!(err, StoreError::Truncated { .. }));
    }

    #[test]
    fn wrong_magic_detected() {
        let store = EmbeddingStore::new(ids(&["a"]), vec![1.0, 0.0], 2, true).unwrap();
        let mut bytes = store.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(StoreError::BadMagic(_))));
    }

    #[test]
    fn version_mismatch_detected() {
        let store = EmbeddingStore::new(ids(&["a"]), vec![1.0, 0.0], 2, true).unwrap();
        let mut bytes = store.to_bytes();
        bytes[4] = 2;
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(StoreError::Version(2))));
    }

    #[test]
    fn manifest_count_mismatch_detected() {
        let store = EmbeddingStore::new(ids(&["a", "b"]), vec![1.0, 0.0, 0.0, 1.0], 2, true).unwrap();
        let mut bytes = store.to_bytes();
        // drop the last manifest entry entirely
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(StoreError::ManifestCount { expected: 2, found: 1 })
        ));
        // one row in the header and payload, two manifest entries
        let mut bytes = EmbeddingStore::new(ids(&["a"]), vec![1.0, 0.0], 2, true).unwrap().to_bytes();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'b');
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(StoreError::ManifestCount { expected: 1, found: 2 })
        ));
    }

    proptest! {
        #[test]
        fn random_stores_round_trip_bit_exactly(
            n in 0usize..64,
            dim in 1usize..128,
            seed in any::<u64>(),
            normalized in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<String> = (0..n).map(|i| format!("id-{i}-{}", rng.random::<u16>())).collect();
            let mut vectors: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            if normalized {
                for row in vectors.chunks_mut(dim) {
                    let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
                    row.iter_mut().for_each(|x| *x /= norm);
                }
            }
            let store = EmbeddingStore::new(ids.clone(), vectors.clone(), dim, normalized).unwrap();
            let back = EmbeddingStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(back.ids(), &ids[..]);
            let same = back.vectors().iter().zip(&vectors).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back.to_bytes(), store.to_bytes());
        }
    }
}
