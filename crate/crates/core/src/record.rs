//! Records, record collections, ground-truth match sets and candidate pairs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

/// One entity description: a stable id plus attribute values aligned with
/// the owning collection's schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub values: Vec<String>,
}

/// A set of records sharing one attribute schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordCollection {
    schema: Vec<String>,
    records: Vec<Record>,
    by_id: BTreeMap<String, usize>,
}

impl RecordCollection {
    pub fn new(schema: Vec<String>) -> Self {
        Self { schema, records: Vec::new(), by_id: BTreeMap::new() }
    }

    pub fn from_records(schema: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let mut c = Self::new(schema);
        for r in records {
            c.push(r)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.id.is_empty() {
            return Err(Error::EmptyId);
        }
        if record.values.len() != self.schema.len() {
            return Err(Error::SchemaMismatch {
                id: record.id,
                expected: self.schema.len(),
                got: record.values.len(),
            });
        }
        if self.by_id.contains_key(&record.id) {
            return Err(Error::DuplicateId { id: record.id });
        }
        self.by_id.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|a| a == name)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Text handed to an encoder: `"name: value"` per attribute, joined by
    /// single spaces.
    pub fn record_text(&self, record: &Record) -> String {
        let mut out = String::new();
        for (name, value) in self.schema.iter().zip(&record.values) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(name);
            out.push_str(": ");
            out.push_str(value);
        }
        out
    }
}

/// An ordered `(r, s)` identifier pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CandidatePair {
    pub r: String,
    pub s: String,
}

impl CandidatePair {
    pub fn new(r: impl Into<String>, s: impl Into<String>) -> Self {
        Self { r: r.into(), s: s.into() }
    }
}

/// Ground-truth matches `{(r, s) | r ≡ s}`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    pairs: BTreeSet<CandidatePair>,
}

impl MatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails on a repeated pair.
    pub fn insert(&mut self, pair: CandidatePair) -> Result<()> {
        if self.pairs.contains(&pair) {
            return Err(Error::DuplicatePair(pair.r, pair.s));
        }
        self.pairs.insert(pair);
        Ok(())
    }

    pub fn contains(&self, pair: &CandidatePair) -> bool {
        self.pairs.contains(pair)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidatePair> {
        self.pairs.iter()
    }

    /// Checks every id against the two collections.
    pub fn validate(&self, r: &RecordCollection, s: &RecordCollection) -> Result<()> {
        for p in &self.pairs {
            if r.get(&p.r).is_none() {
                return Err(Error::UnknownRecord(p.r.clone()));
            }
            if s.get(&p.s).is_none() {
                return Err(Error::UnknownRecord(p.s.clone()));
            }
        }
        Ok(())
    }
}

impl FromIterator<CandidatePair> for MatchSet {
    fn from_iter<T: IntoIterator<Item = CandidatePair>>(iter: T) -> Self {
        Self { pairs: iter.into_iter().collect() }
    }
}
