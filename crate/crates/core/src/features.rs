//! Pair features: the embedding interaction vector `[v_r | v_s | |v_r - v_s| | v_r ⊙ v_s]`
//! and its lexical extension with Jaro-Winkler similarities on key attributes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::embedding::EmbeddingMatrix;
use crate::record::{CandidatePair, RecordCollection};
use crate::{Error, Result};

const WINKLER_PREFIX_CAP: usize = 4;
const WINKLER_SCALE: f64 = 0.1;
const WINKLER_BOOST_THRESHOLD: f64 = 0.7;

/// Writes the interaction vector of `v_r`, `v_s` into `out` (length `4d`).
pub fn write_interaction(v_r: &[f32], v_s: &[f32], out: &mut [f64]) {
    let d = v_r.len();
    debug_assert_eq!(v_s.len(), d);
    debug_assert_eq!(out.len(), 4 * d);
    let (a, rest) = out.split_at_mut(d);
    let (b, rest) = rest.split_at_mut(d);
    let (diff, prod) = rest.split_at_mut(d);
    for i in 0..d {
        let x = f64::from(v_r[i]);
        let y = f64::from(v_s[i]);
        a[i] = x;
        b[i] = y;
        diff[i] = libm::fabs(x - y);
        prod[i] = x * y;
    }
}

pub fn interaction_vector(v_r: &[f32], v_s: &[f32]) -> Result<Vec<f64>> {
    if v_r.len() != v_s.len() {
        return Err(Error::DimMismatch { expected: v_r.len(), got: v_s.len() });
    }
    let mut out = vec![0.0; 4 * v_r.len()];
    write_interaction(v_r, v_s, &mut out);
    Ok(out)
}

fn normalize(s: &str) -> Vec<char> {
    s.trim().to_lowercase().chars().collect()
}

fn jaro_chars(a: &[char], b: &[char]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let window = (a.len().max(b.len()) / 2).saturating_sub(1);
    let mut a_hit = vec![false; a.len()];
    let mut b_hit = vec![false; b.len()];
    let mut matches = 0usize;
    for (i, ca) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        for j in lo..hi {
            if !b_hit[j] && b[j] == *ca {
                a_hit[i] = true;
                b_hit[j] = true;
                matches += 1;
                break;
            }
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let mut half_transpositions = 0usize;
    let mut k = 0usize;
    for (i, ca) in a.iter().enumerate() {
        if !a_hit[i] {
            continue;
        }
        while !b_hit[k] {
            k += 1;
        }
        if *ca != b[k] {
            half_transpositions += 1;
        }
        k += 1;
    }
    let m = matches as f64;
    let t = (half_transpositions / 2) as f64;
    (m / a.len() as f64 + m / b.len() as f64 + (m - t) / m) / 3.0
}

/// Jaro-Winkler similarity in `[0, 1]`, case-insensitive after trimming.
/// Both empty gives 1, exactly one empty gives 0.
pub fn jaro_winkler(a: &str, b: &str) -> f64 {
    let (mut x, mut y) = (normalize(a), normalize(b));
    // canonical argument order keeps the greedy matching symmetric
    if x > y {
        core::mem::swap(&mut x, &mut y);
    }
    let j = jaro_chars(&x, &y);
    if j <= WINKLER_BOOST_THRESHOLD {
        return j;
    }
    let prefix = x.iter().zip(&y).take(WINKLER_PREFIX_CAP).take_while(|(p, q)| p == q).count();
    j + prefix as f64 * WINKLER_SCALE * (1.0 - j)
}

/// Resolves key attributes and record/embedding lookups once, then
/// featurizes many pairs.
#[derive(Debug, Clone)]
pub struct LexicalFeaturizer<'a> {
    records_r: &'a RecordCollection,
    records_s: &'a RecordCollection,
    emb_r: &'a EmbeddingMatrix,
    emb_s: &'a EmbeddingMatrix,
    columns: Vec<(usize, usize)>,
}

impl<'a> LexicalFeaturizer<'a> {
    pub fn new(
        records_r: &'a RecordCollection,
        records_s: &'a RecordCollection,
        emb_r: &'a EmbeddingMatrix,
        emb_s: &'a EmbeddingMatrix,
        key_attrs: &[String],
    ) -> Result<Self> {
        if emb_r.dim() != emb_s.dim() {
            return Err(Error::DimMismatch { expected: emb_r.dim(), got: emb_s.dim() });
        }
        let columns = key_attrs
            .iter()
            .map(|name| {
                let r = records_r.attribute_index(name);
                let s = records_s.attribute_index(name);
                r.zip(s).ok_or_else(|| Error::UnknownAttribute(name.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records_r, records_s, emb_r, emb_s, columns })
    }

    pub fn embedding_dim(&self) -> usize {
        self.emb_r.dim()
    }

    pub fn interaction_dim(&self) -> usize {
        4 * self.emb_r.dim()
    }

    pub fn lexical_dim(&self) -> usize {
        self.interaction_dim() + self.columns.len()
    }

    fn vectors(&self, pair: &CandidatePair) -> Result<(&'a [f32], &'a [f32])> {
        let r = self.emb_r.get(&pair.r).ok_or_else(|| Error::UnknownRecord(pair.r.clone()))?;
        let s = self.emb_s.get(&pair.s).ok_or_else(|| Error::UnknownRecord(pair.s.clone()))?;
        Ok((r, s))
    }

    pub fn interaction(&self, pair: &CandidatePair) -> Result<Vec<f64>> {
        let (r, s) = self.vectors(pair)?;
        let mut out = vec![0.0; self.interaction_dim()];
        write_interaction(r, s, &mut out);
        Ok(out)
    }

    pub fn lexical(&self, pair: &CandidatePair) -> Result<Vec<f64>> {
        let rec_r = self.records_r.get(&pair.r).ok_or_else(|| Error::UnknownRecord(pair.r.clone()))?;
        let rec_s = self.records_s.get(&pair.s).ok_or_else(|| Error::UnknownRecord(pair.s.clone()))?;
        let (r, s) = self.vectors(pair)?;
        let d4 = self.interaction_dim();
        let mut out = vec![0.0; self.lexical_dim()];
        write_interaction(r, s, &mut out[..d4]);
        for (slot, &(cr, cs)) in out[d4..].iter_mut().zip(&self.columns) {
            *slot = jaro_winkler(&rec_r.values[cr], &rec_s.values[cs]);
        }
        Ok(out)
    }
}

/// One-shot lexical featurization of a single pair.
pub fn lexical_feature_vector(
    pair: &CandidatePair,
    records_r: &RecordCollection,
    records_s: &RecordCollection,
    key_attrs: &[String],
    emb_r: &EmbeddingMatrix,
    emb_s: &EmbeddingMatrix,
) -> Result<Vec<f64>> {
    LexicalFeaturizer::new(records_r, records_s, emb_r, emb_s, key_attrs)?.lexical(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Record;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn interaction_examples() {
        let v = interaction_vector(&[0.6, 0.8], &[0.6, 0.8]).unwrap();
        assert!(close(&v, &[0.6, 0.8, 0.6, 0.8, 0.0, 0.0, 0.36, 0.64]));
        let v = interaction_vector(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(interaction_vector(&[0.1; 384], &[0.2; 384]).unwrap().len(), 1536);
        assert!(interaction_vector(&[1.0], &[1.0, 0.0]).is_err());
    }

    /// Hand evaluation: MARTHA vs MARHTA has m = 6 matches and the T/H swap
    /// gives t = 1, so jaro = (6/6 + 6/6 + 5/6) / 3 = 17/18; the common
    /// prefix "MAR" has length 3, so jw = 17/18 + 3 * 0.1 * (1/18).
    #[test]
    fn jaro_winkler_hand_evaluated() {
        let expected: f64 = 17.0 / 18.0 + 0.3 * (1.0 / 18.0);
        assert!((expected - 0.9611).abs() < 1e-4);
        assert!((jaro_winkler("MARTHA", "MARHTA") - expected).abs() < 1e-12);
        // DIXON / DICKSONX: m = 4, t = 0, jaro = (4/5 + 4/8 + 1) / 3, prefix 2
        let j: f64 = (4.0 / 5.0 + 4.0 / 8.0 + 1.0) / 3.0;
        assert!((jaro_winkler("DIXON", "DICKSONX") - (j + 0.2 * (1.0 - j))).abs() < 1e-12);
    }

    #[test]
    fn jaro_winkler_conventions() {
        assert_eq!(jaro_winkler("query", "query"), 1.0);
        assert_eq!(jaro_winkler("abc", "xyz"), 0.0);
        assert_eq!(jaro_winkler("", ""), 1.0);
        assert_eq!(jaro_winkler("abc", ""), 0.0);
        assert_eq!(jaro_winkler("  Query ", "query"), 1.0);
    }

    proptest! {
        #[test]
        fn jaro_winkler_symmetric_and_bounded(a in "[a-dA-D ]{0,12}", b in "[a-dA-D ]{0,12}") {
            let x = jaro_winkler(&a, &b);
            prop_assert_eq!(x, jaro_winkler(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            let (na, nb) = (a.trim().to_lowercase(), b.trim().to_lowercase());
            if !na.is_empty() || !nb.is_empty() {
                prop_assert_eq!(x == 1.0, na == nb);
            }
        }

        #[test]
        fn interaction_diff_block_nonnegative(v in proptest::collection::vec(-1.0f32..1.0, 6), w in proptest::collection::vec(-1.0f32..1.0, 6)) {
            let out = interaction_vector(&v, &w).unwrap();
            prop_assert!(out[12..18].iter().all(|x| *x >= 0.0));
            prop_assert_eq!(out, interaction_vector(&v, &w).unwrap());
        }
    }

    fn fixture() -> (RecordCollection, RecordCollection, EmbeddingMatrix, EmbeddingMatrix) {
        let schema = vec!["title".to_string(), "name".to_string()];
        let r = RecordCollection::from_records(
            schema.clone(),
            vec![Record { id: "r1".into(), values: vec!["Apple iPhone".into(), "".into()] }],
        )
        .unwrap();
        let s = RecordCollection::from_records(
            schema,
            vec![Record { id: "s1".into(), values: vec!["apple iphone".into(), "phone".into()] }],
        )
        .unwrap();
        let v = vec![0.5f32, 0.5, 0.5, 0.5];
        let er = EmbeddingMatrix::from_rows(4, vec![("r1".to_string(), v.clone())]).unwrap();
        let es = EmbeddingMatrix::from_rows(4, vec![("s1".to_string(), v)]).unwrap();
        (r, s, er, es)
    }

    #[test]
    fn lexical_vector_layout() {
        let (r, s, er, es) = fixture();
        let pair = CandidatePair::new("r1", "s1");
        let keys = vec!["title".to_string(), "name".to_string()];
        let v = lexical_feature_vector(&pair, &r, &s, &keys, &er, &es).unwrap();
        assert_eq!(v.len(), 18);
        assert!(v[8..12].iter().all(|x| *x == 0.0));
        assert_eq!(v[16], 1.0);
        assert_eq!(v[17], 0.0);
        let only_title = lexical_feature_vector(&pair, &r, &s, &keys[..1], &er, &es).unwrap();
        assert_eq!(only_title[16..], [1.0]);
    }

    #[test]
    fn lexical_vector_errors() {
        let (r, s, er, es) = fixture();
        let keys = vec!["brand".to_string()];
        assert_eq!(
            lexical_feature_vector(&CandidatePair::new("r1", "s1"), &r, &s, &keys, &er, &es),
            Err(Error::UnknownAttribute("brand".into()))
        );
        let keys = vec!["title".to_string()];
        assert_eq!(
            lexical_feature_vector(&CandidatePair::new("r9", "s1"), &r, &s, &keys, &er, &es),
            Err(Error::UnknownRecord("r9".into()))
        );
    }
}
