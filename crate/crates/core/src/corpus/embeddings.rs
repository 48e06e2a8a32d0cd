//! Precomputed response embeddings and the `LATTEEMB` file format.
//!
//! ```text
//! magic   8 bytes  "LATTEEMB"
//! version u32      1
//! dim     u32
//! count   u64
//! rows    count x dim little-endian f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::audit::AccessAudit;
use crate::format::{self, FormatError};
use crate::linalg;

use super::CorpusError;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"LATTEEMB";
pub const EMBEDDING_VERSION: u32 = 1;
/// Allowed deviation of a stored row's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    rows: Vec<f32>,
}

impl EmbeddingStore {
    /// Builds a store from row-major data, validating that every row is unit norm.
    pub fn new(dim: usize, rows: Vec<f32>) -> Result<Self, CorpusError> {
        if dim == 0 {
            return Err(CorpusError::Dimension { expected: 1, found: 0 });
        }
        if rows.len() % dim != 0 {
            return Err(CorpusError::Format(FormatError::Malformed(format!(
                "{} values is not a multiple of dim {dim}",
                rows.len()
            ))));
        }
        let store = Self { dim, rows };
        store.validate()?;
        Ok(store)
    }

    pub fn from_vectors<V: AsRef<[f64]>>(dim: usize, vectors: &[V]) -> Result<Self, CorpusError> {
        let mut rows = Vec::with_capacity(dim * vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(CorpusError::Validation { row: i, reason: format!("length {} differs from dim {dim}", v.len()) });
            }
            rows.extend(v.iter().map(|&x| x as f32));
        }
        Self::new(dim, rows)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        for i in 0..self.len() {
            let row = self.row(i);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(CorpusError::Validation { row: i, reason: "non-finite value".into() });
            }
            let n = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(CorpusError::Validation { row: i, reason: format!("norm {n:.6} is not unit") });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        linalg::to_f64(self.row(i))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        w.write_all(EMBEDDING_MAGIC)?;
        format::write_u32(w, EMBEDDING_VERSION)?;
        format::write_u32(w, self.dim as u32)?;
        format::write_u64(w, self.len() as u64)?;
        for &x in &self.rows {
            format::write_f32(w, x)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 4 * self.rows.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| CorpusError::io(path, e))?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, expected_dim: usize) -> Result<Self, CorpusError> {
        format::expect_magic(r, EMBEDDING_MAGIC)?;
        let version = format::read_u32(r, "version")?;
        if version != EMBEDDING_VERSION {
            return Err(FormatError::Version(version).into());
        }
        let dim = format::read_u32(r, "dim")? as usize;
        if dim != expected_dim {
            return Err(CorpusError::Dimension { expected: expected_dim, found: dim });
        }
        let count = format::read_u64(r, "count")? as usize;
        let total = count
            .checked_mul(dim)
            .ok_or_else(|| FormatError::Malformed("row count overflow".into()))?;
        let mut rows = Vec::with_capacity(total.min(1 << 26));
        for _ in 0..total {
            rows.push(format::read_f32(r, "embedding rows")?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(FormatError::Io)? != 0 {
            return Err(FormatError::Malformed("trailing bytes after embedding rows".into()).into());
        }
        Self::new(dim, rows)
    }

    pub fn load(path: &Path, expected_dim: usize) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), expected_dim)
    }

    /// Reads only the header and returns the row width.
    pub fn peek_dim(path: &Path) -> Result<usize, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let mut r = BufReader::new(file);
        format::expect_magic(&mut r, EMBEDDING_MAGIC)?;
        let version = format::read_u32(&mut r, "version")?;
        if version != EMBEDDING_VERSION {
            return Err(FormatError::Version(version).into());
        }
        Ok(format::read_u32(&mut r, "dim")? as usize)
    }

    /// Reads a file whose width is taken from its own header.
    pub fn load_any(path: &Path) -> Result<Self, CorpusError> {
        let dim = Self::peek_dim(path)?;
        Self::load(path, dim)
    }
}

/// Read access to an [`EmbeddingStore`] that reports every row it hands out
/// to an optional [`AccessAudit`] under a stage label.
#[derive(Clone, Copy)]
pub struct EmbeddingView<'a> {
    store: &'a EmbeddingStore,
    audit: Option<&'a AccessAudit>,
    stage: &'a str,
}

impl<'a> EmbeddingView<'a> {
    pub fn new(store: &'a EmbeddingStore) -> Self {
        Self { store, audit: None, stage: "" }
    }

    pub fn audited(store: &'a EmbeddingStore, audit: &'a AccessAudit, stage: &'a str) -> Self {
        Self { store, audit: Some(audit), stage }
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn get(&self, row: usize) -> Vec<f64> {
        if let Some(audit) = self.audit {
            audit.record(self.stage, row);
        }
        self.store.row_f64(row)
    }

    pub fn store(&self) -> &'a EmbeddingStore {
        self.store
    }
}
