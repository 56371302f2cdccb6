//! Dense, L2-normalized record embeddings.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math::norm64;
use crate::record::RecordCollection;
use crate::{Error, Result};

/// Vectors whose norm is already this close to 1 are stored untouched, so
/// that re-loading a saved matrix is bit-exact.
const UNIT_TOLERANCE: f64 = 1e-6;

/// One unit vector of length `dim` per record id, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    by_id: BTreeMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dim must be positive".into()));
        }
        Ok(Self { dim, ids: Vec::new(), data: Vec::new(), by_id: BTreeMap::new() })
    }

    pub fn from_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut m = Self::new(dim)?;
        for (id, v) in rows {
            m.push(id, &v)?;
        }
        Ok(m)
    }

    /// Appends a row, normalizing it to unit length.
    pub fn push(&mut self, id: String, v: &[f32]) -> Result<()> {
        if id.is_empty() {
            return Err(Error::EmptyId);
        }
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { id, expected: self.dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { id });
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId { id });
        }
        let n = norm64(v);
        if n == 0.0 {
            return Err(Error::ZeroVector { id });
        }
        let start = self.data.len();
        if libm::fabs(n - 1.0) <= UNIT_TOLERANCE {
            self.data.extend_from_slice(v);
        } else {
            self.data.extend(v.iter().map(|&x| (f64::from(x) / n) as f32));
        }
        if self.data[start..].iter().any(|x| !x.is_finite()) {
            self.data.truncate(start);
            return Err(Error::NonFinite { id });
        }
        self.by_id.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        Ok(())
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

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    /// Raw row-major storage.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    /// Every record in `records` must have a vector.
    pub fn check_covers(&self, records: &RecordCollection) -> Result<()> {
        for id in records.ids() {
            if !self.by_id.contains_key(id) {
                return Err(Error::MissingEmbedding(id.into()));
            }
        }
        Ok(())
    }

    /// A new matrix holding only `ids`, in the given order.
    pub fn subset<'a, I>(&self, ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut m = Self::new(self.dim)?;
        for id in ids {
            let v = self.get(id).ok_or_else(|| Error::MissingEmbedding(id.into()))?;
            m.push(id.into(), v)?;
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn normalizes_on_push() {
        let m = EmbeddingMatrix::from_rows(2, vec![("a".to_string(), vec![3.0, 4.0])]).unwrap();
        let v = m.get("a").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut m = EmbeddingMatrix::new(2).unwrap();
        assert_eq!(m.push("z".into(), &[0.0, 0.0]), Err(Error::ZeroVector { id: "z".into() }));
        assert_eq!(m.push("n".into(), &[f32::NAN, 1.0]), Err(Error::NonFinite { id: "n".into() }));
        assert!(matches!(m.push("d".into(), &[1.0]), Err(Error::DimensionMismatch { .. })));
        m.push("a".into(), &[1.0, 0.0]).unwrap();
        assert!(matches!(m.push("a".into(), &[0.0, 1.0]), Err(Error::DuplicateId { .. })));
        assert!(EmbeddingMatrix::new(0).is_err());
    }

    #[test]
    fn renormalizing_is_idempotent() {
        let m = EmbeddingMatrix::from_rows(3, vec![("a".to_string(), vec![0.3, -1.7, 2.9])]).unwrap();
        let again = EmbeddingMatrix::from_rows(3, vec![("a".to_string(), m.row(0).to_vec())]).unwrap();
        assert_eq!(m.row(0), again.row(0));
    }
}
