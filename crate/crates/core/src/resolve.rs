//! Two-stage resolution of held-out records and evaluation metrics.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ann::AnnIndex;
use crate::embedding::EmbeddingMatrix;
use crate::features::LexicalFeaturizer;
use crate::mlp::MlpModel;
use crate::record::{CandidatePair, MatchSet};
use crate::{Error, Result};

const SCORE_BATCH: usize = 2048;

/// Top-k candidates for every query record not in `exclusion`, sorted by
/// `(r, s)`.
pub fn generate_candidates(
    index: &AnnIndex,
    queries: &EmbeddingMatrix,
    k: usize,
    ef_search: usize,
    exclusion: &BTreeSet<String>,
) -> Result<Vec<CandidatePair>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    let mut out = Vec::new();
    for (id, v) in queries.iter() {
        if exclusion.contains(id) {
            continue;
        }
        for hit in index.query(v, k, ef_search)? {
            out.push(CandidatePair::new(id, hit.id));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedMatch {
    pub pair: CandidatePair,
    pub stage1: f64,
    pub stage2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    /// Sorted by stage-2 probability, descending.
    pub matches: Vec<ResolvedMatch>,
    pub candidates: usize,
    pub stage1_survivors: usize,
    pub lexical_computations: usize,
}

fn check_dim(model: &MlpModel, expected: usize) -> Result<()> {
    if model.input_dim() != expected {
        return Err(Error::DimMismatch { expected, got: model.input_dim() });
    }
    Ok(())
}

/// Recall filter on interaction vectors, then precision filter on lexical
/// vectors of the survivors. A pair passes a stage when its probability is
/// strictly above that stage's threshold.
pub fn resolve(
    candidates: &[CandidatePair],
    recall_model: &MlpModel,
    recall_threshold: f64,
    precision_model: &MlpModel,
    precision_threshold: f64,
    featurizer: &LexicalFeaturizer<'_>,
) -> Result<Resolution> {
    check_dim(recall_model, featurizer.interaction_dim())?;
    check_dim(precision_model, featurizer.lexical_dim())?;

    let mut survivors = Vec::new();
    for batch in candidates.chunks(SCORE_BATCH) {
        for pair in batch {
            let p = recall_model.predict(&featurizer.interaction(pair)?);
            if p > recall_threshold {
                survivors.push((pair, p));
            }
        }
    }

    let mut lexical_computations = 0;
    let mut matches = Vec::new();
    for &(pair, stage1) in &survivors {
        let x = featurizer.lexical(pair)?;
        lexical_computations += 1;
        let stage2 = precision_model.predict(&x);
        if stage2 > precision_threshold {
            matches.push(ResolvedMatch { pair: pair.clone(), stage1, stage2 });
        }
    }
    matches.sort_by(|a, b| b.stage2.total_cmp(&a.stage2).then_with(|| a.pair.cmp(&b.pair)));
    Ok(Resolution {
        matches,
        candidates: candidates.len(),
        stage1_survivors: survivors.len(),
        lexical_computations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub blocking_recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub candidates: usize,
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Scores `predicted` against the truth pairs whose query record is not
/// excluded. Precision is 0 when nothing is predicted.
pub fn evaluate<'p>(
    predicted: impl IntoIterator<Item = &'p CandidatePair>,
    truth: &MatchSet,
    candidates: &[CandidatePair],
    exclusion: &BTreeSet<String>,
) -> Result<Metrics> {
    let effective: BTreeSet<&CandidatePair> = truth.iter().filter(|p| !exclusion.contains(&p.r)).collect();
    if effective.is_empty() {
        return Err(Error::Empty("truth set after exclusion"));
    }
    let predicted: BTreeSet<&CandidatePair> = predicted.into_iter().filter(|p| !exclusion.contains(&p.r)).collect();
    let tp = predicted.iter().filter(|p| effective.contains(*p)).count();
    let fp = predicted.len() - tp;
    let fn_ = effective.len() - tp;
    let precision = if predicted.is_empty() { 0.0 } else { tp as f64 / predicted.len() as f64 };
    let recall = tp as f64 / effective.len() as f64;
    let blocked: BTreeSet<&CandidatePair> = candidates.iter().collect();
    let surviving = effective.iter().filter(|p| blocked.contains(*p)).count();
    Ok(Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        blocking_recall: surviving as f64 / effective.len() as f64,
        tp,
        fp,
        fn_,
        candidates: candidates.len(),
    })
}
