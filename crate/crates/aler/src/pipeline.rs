//! The pipeline stages as plain functions over in-memory data.

use std::collections::BTreeSet;

use aler_core::{
    chunk_count, evaluate, generate_candidates, kmeans_partition, optimal_threshold, predict_batch, resolve,
    sample_records, AnnIndex, CandidatePair, ChunkSet, EmbeddingMatrix, HnswParams, LexicalFeaturizer, MatchSet,
    Metrics, MlpModel, RecordCollection, Resolution, SamplePlan, ThresholdResult, TrainedArtifacts,
};

use crate::persist::{self, PersistError};

pub struct Corpus {
    pub records_r: RecordCollection,
    pub records_s: RecordCollection,
    pub emb_r: EmbeddingMatrix,
    pub emb_s: EmbeddingMatrix,
    pub key_attrs: Vec<String>,
}

impl Corpus {
    pub fn featurizer(&self) -> aler_core::Result<LexicalFeaturizer<'_>> {
        LexicalFeaturizer::new(&self.records_r, &self.records_s, &self.emb_r, &self.emb_s, &self.key_attrs)
    }
}

impl From<aler_core::synth::SyntheticCorpus> for Corpus {
    fn from(c: aler_core::synth::SyntheticCorpus) -> Self {
        Self { records_r: c.records_r, records_s: c.records_s, emb_r: c.emb_r, emb_s: c.emb_s, key_attrs: c.key_attrs }
    }
}

pub fn build_index(emb_s: &EmbeddingMatrix, params: HnswParams, seed: u64) -> aler_core::Result<AnnIndex> {
    AnnIndex::build(emb_s, params, seed)
}

/// Samples `R`, picks the chunk count (or uses `n_chunks`) and clusters
/// the sample.
pub fn partition(
    emb_r: &EmbeddingMatrix,
    proportion: f64,
    n_chunks: Option<usize>,
    seed: u64,
    max_iters: usize,
) -> aler_core::Result<(SamplePlan, ChunkSet)> {
    let plan = sample_records(emb_r.ids(), proportion, seed)?;
    let sample = emb_r.subset(plan.sampled_ids.iter().map(String::as_str))?;
    let n = n_chunks.unwrap_or_else(|| chunk_count(sample.len()));
    let chunks = kmeans_partition(&sample, n, seed, max_iters)?;
    Ok((plan, chunks))
}

/// Rounds both models to their on-disk precision and re-derives the
/// thresholds on the validation set with the rounded models.
pub fn quantize_artifacts(art: &mut TrainedArtifacts, feat: &LexicalFeaturizer<'_>) -> Result<(), PersistError> {
    let valid: Vec<_> = art.labeled.validation().collect();
    let labels: Vec<u8> = valid.iter().map(|e| e.label).collect();
    let xi = valid.iter().map(|e| feat.interaction(&e.pair)).collect::<aler_core::Result<Vec<_>>>()?;
    let xl = valid.iter().map(|e| feat.lexical(&e.pair)).collect::<aler_core::Result<Vec<_>>>()?;
    let refit = |model: &MlpModel, x: &[Vec<f64>]| -> Result<(MlpModel, ThresholdResult), PersistError> {
        let q = persist::quantize(model)?;
        let probs = predict_batch(&q, x)?;
        let thr = optimal_threshold(&probs, &labels)?;
        Ok((q, thr))
    };
    (art.recall_model, art.recall_threshold) = refit(&art.recall_model, &xi)?;
    (art.precision_model, art.precision_threshold) = refit(&art.precision_model, &xl)?;
    Ok(())
}

pub struct Outcome {
    pub candidates: Vec<CandidatePair>,
    pub resolution: Resolution,
    pub metrics: Option<Metrics>,
}

/// Candidate generation, the two-stage cascade and, when `truth` is given,
/// evaluation, all honoring record-level exclusion.
#[allow(clippy::too_many_arguments)]
pub fn resolve_held_out(
    corpus: &Corpus,
    index: &AnnIndex,
    k: usize,
    ef_search: usize,
    exclusion: &BTreeSet<String>,
    models: (&MlpModel, f64, &MlpModel, f64),
    truth: Option<&MatchSet>,
) -> aler_core::Result<Outcome> {
    let candidates = generate_candidates(index, &corpus.emb_r, k, ef_search.max(k), exclusion)?;
    let feat = corpus.featurizer()?;
    let (mr, tr, mp, tp) = models;
    let resolution = resolve(&candidates, mr, tr, mp, tp, &feat)?;
    let metrics = truth
        .map(|t| evaluate(resolution.matches.iter().map(|m| &m.pair), t, &candidates, exclusion))
        .transpose()?;
    Ok(Outcome { candidates, resolution, metrics })
}
