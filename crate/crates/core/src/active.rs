//! The partitioned active-learning loop.
//!
//! One candidate pool per chunk, a fixed stratified validation set, a
//! random seed set from the first pool, then a short loop per chunk:
//! train the recall model from scratch on everything labeled so far, score
//! it on the validation set, stop on stalled F1, otherwise score the
//! chunk's unlabeled pairs, query a batch and fuse the answers. The final
//! recall and precision models are trained on the full training set.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ann::AnnIndex;
use crate::embedding::EmbeddingMatrix;
use crate::features::LexicalFeaturizer;
use crate::math::ceil_fraction;
use crate::mlp::{self, MlpModel, ThresholdResult, TrainConfig};
use crate::oracle::{LabelBatch, Oracle, OracleError, Progress, Provenance};
use crate::partition::ChunkSet;
use crate::record::{CandidatePair, RecordCollection};
use crate::{Error, Result};

/// How each loop iteration picks the pairs to label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryStrategy {
    /// Most confident pairs plus pairs closest to 0.5.
    Hybrid,
    /// Pairs closest to 0.5 only.
    Uncertainty,
    /// Uniform over unlabeled pairs.
    Random,
}

impl core::str::FromStr for QueryStrategy {
    type Err = String;

    fn from_str(s: &str) -> core::result::Result<Self, String> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "uncertainty" => Ok(Self::Uncertainty),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown strategy {other:?} (hybrid|uncertainty|random)")),
        }
    }
}

impl core::fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Hybrid => "hybrid",
            Self::Uncertainty => "uncertainty",
            Self::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub seed_budget: usize,
    /// Labels per loop iteration.
    pub batch_budget: usize,
    pub max_iterations: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub validation_fraction: f64,
    pub validation_cap: usize,
    pub k: usize,
    pub ef_search: usize,
    pub confident_fraction: f64,
    pub strategy: QueryStrategy,
    /// Optional cap on all labels of the run, enforced by the ledger.
    pub label_cap: Option<usize>,
    /// Training hyper-parameters; the seed is replaced per training call.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            seed_budget: 100,
            batch_budget: 300,
            max_iterations: 8,
            patience: 2,
            min_delta: 0.05,
            validation_fraction: 0.1,
            validation_cap: 1000,
            k: 10,
            ef_search: 64,
            confident_fraction: 0.5,
            strategy: QueryStrategy::Hybrid,
            label_cap: None,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seed_budget", self.seed_budget),
            ("batch_budget", self.batch_budget),
            ("patience", self.patience),
            ("validation_cap", self.validation_cap),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.confident_fraction) {
            return Err(Error::InvalidParameter("confident_fraction must lie in [0, 1]".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 1.0) {
            return Err(Error::InvalidParameter("validation_fraction must lie in (0, 1]".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::InvalidParameter("min_delta must be non-negative".into()));
        }
        if self.ef_search < self.k {
            return Err(Error::InvalidParameter("ef_search must be >= k".into()));
        }
        Ok(())
    }
}

/// All top-k pairs generated for the members of one chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePool {
    pub chunk: usize,
    /// Unique pairs, sorted.
    pub pairs: Vec<CandidatePair>,
}

/// Queries the index with every chunk member and collects unique `(r, s)`
/// pairs per chunk.
pub fn build_pools(
    chunks: &ChunkSet,
    index: &AnnIndex,
    emb_r: &EmbeddingMatrix,
    k: usize,
    ef_search: usize,
) -> Result<Vec<CandidatePool>> {
    chunks
        .chunks
        .iter()
        .enumerate()
        .map(|(chunk, members)| {
            let mut pairs = BTreeSet::new();
            for r in members {
                let v = emb_r.get(r).ok_or_else(|| Error::MissingEmbedding(r.clone()))?;
                for hit in index.query(v, k, ef_search)? {
                    pairs.insert(CandidatePair::new(r.clone(), hit.id));
                }
            }
            Ok(CandidatePool { chunk, pairs: pairs.into_iter().collect() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub pair: CandidatePair,
    pub label: u8,
    pub provenance: Provenance,
}

/// Every pair the oracle has answered, with where it came from. The
/// training set `G` is everything except validation entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledSet {
    entries: Vec<LabeledPair>,
    index: BTreeMap<CandidatePair, usize>,
}

impl LabeledSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails if the pair is already labeled.
    pub fn insert(&mut self, entry: LabeledPair) -> Result<()> {
        if self.index.contains_key(&entry.pair) {
            return Err(Error::DuplicatePair(entry.pair.r, entry.pair.s));
        }
        self.index.insert(entry.pair.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn contains(&self, pair: &CandidatePair) -> bool {
        self.index.contains_key(pair)
    }

    pub fn get(&self, pair: &CandidatePair) -> Option<&LabeledPair> {
        self.index.get(pair).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[LabeledPair] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn training(&self) -> impl Iterator<Item = &LabeledPair> {
        self.entries.iter().filter(|e| e.provenance != Provenance::Validation)
    }

    pub fn validation(&self) -> impl Iterator<Item = &LabeledPair> {
        self.entries.iter().filter(|e| e.provenance == Provenance::Validation)
    }

    /// Query-side record ids of every labeled pair; these records are held
    /// out of resolution.
    pub fn exclusion_set(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.pair.r.clone()).collect()
    }

    /// FNV-1a digest of the validation entries.
    pub fn validation_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in self.validation() {
            eat(e.pair.r.as_bytes());
            eat(&[0]);
            eat(e.pair.s.as_bytes());
            eat(&[0, e.label]);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopEntry {
    pub chunk: usize,
    pub iteration: usize,
    pub labels: usize,
}

/// Oracle calls by purpose.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BudgetLedger {
    pub hard_cap: Option<usize>,
    pub seed: usize,
    pub validation: usize,
    pub loops: Vec<LoopEntry>,
    /// The run stopped early because the budget ran out.
    pub truncated: bool,
}

impl BudgetLedger {
    pub fn new(hard_cap: Option<usize>) -> Self {
        Self { hard_cap, ..Self::default() }
    }

    pub fn loop_total(&self) -> usize {
        self.loops.iter().map(|l| l.labels).sum()
    }

    pub fn total(&self) -> usize {
        self.seed + self.validation + self.loop_total()
    }

    pub fn remaining(&self) -> Option<usize> {
        self.hard_cap.map(|c| c.saturating_sub(self.total()))
    }

    /// Trims a request to what the cap still allows; true if trimmed.
    fn clip<T>(&mut self, request: &mut Vec<T>) -> bool {
        match self.remaining() {
            Some(left) if request.len() > left => {
                request.truncate(left);
                self.truncated = true;
                true
            }
            _ => false,
        }
    }
}

/// Per-pool validation sizes: `ceil(fraction * |C_i|)`, scaled down
/// proportionally (largest remainder) when the total exceeds `cap`.
pub fn plan_validation(pool_sizes: &[usize], fraction: f64, cap: usize) -> Vec<usize> {
    let want: Vec<usize> =
        pool_sizes.iter().map(|&n| ceil_fraction(fraction, n).min(n)).collect();
    let total: usize = want.iter().sum();
    if total <= cap {
        return want;
    }
    let (cap128, total128) = (cap as u128, total as u128);
    let mut sizes: Vec<usize> = want.iter().map(|&w| (w as u128 * cap128 / total128) as usize).collect();
    let mut leftover = cap - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..want.len()).collect();
    by_remainder.sort_by_key(|&i| core::cmp::Reverse(want[i] as u128 * cap128 % total128));
    for i in by_remainder {
        if leftover == 0 {
            break;
        }
        if sizes[i] < want[i] {
            sizes[i] += 1;
            leftover -= 1;
        }
    }
    sizes
}

fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_validation(pools: &[CandidatePool], fraction: f64, cap: usize, seed: u64) -> Vec<CandidatePair> {
    let sizes: Vec<usize> = pools.iter().map(|p| p.pairs.len()).collect();
    let plan = plan_validation(&sizes, fraction, cap);
    let mut out = Vec::new();
    for (i, (pool, &take)) in pools.iter().zip(&plan).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7661_6c00 + i as u64));
        let picks = rand::seq::index::sample(&mut rng, pool.pairs.len(), take);
        out.extend(picks.into_iter().map(|j| pool.pairs[j].clone()));
    }
    out
}

fn fuse(
    labeled: &mut LabeledSet,
    pairs: &[CandidatePair],
    batch: &LabelBatch,
    provenance: Provenance,
) -> Result<usize> {
    let mut n = 0;
    for (pair, answer) in pairs.iter().zip(&batch.answers) {
        if let Some(label) = answer {
            labeled.insert(LabeledPair { pair: pair.clone(), label: *label, provenance })?;
            n += 1;
        }
    }
    Ok(n)
}

/// Samples and labels the fixed validation set.
pub fn build_validation<O: Oracle + ?Sized>(
    pools: &[CandidatePool],
    fraction: f64,
    cap: usize,
    oracle: &mut O,
    seed: u64,
) -> core::result::Result<Vec<LabeledPair>, RunError> {
    let mut labeled = LabeledSet::new();
    let mut ledger = BudgetLedger::new(None);
    label_validation(pools, fraction, cap, oracle, seed, &mut labeled, &mut ledger)?;
    Ok(labeled.entries)
}

fn label_validation<O: Oracle + ?Sized>(
    pools: &[CandidatePool],
    fraction: f64,
    cap: usize,
    oracle: &mut O,
    seed: u64,
    labeled: &mut LabeledSet,
    ledger: &mut BudgetLedger,
) -> core::result::Result<(), RunError> {
    let pairs = sample_validation(pools, fraction, cap, seed);
    if let Some(left) = ledger.remaining() {
        if left < pairs.len() {
            ledger.truncated = true;
            return Err(RunError::IncompleteValidation { ledger: ledger.clone(), reason: OracleError::BudgetExhausted });
        }
    }
    let batch = oracle
        .label(&pairs, Provenance::Validation)
        .map_err(|e| RunError::Oracle { source: e, ledger: ledger.clone() })?;
    ledger.validation += fuse(labeled, &pairs, &batch, Provenance::Validation)?;
    if !batch.is_complete() {
        ledger.truncated = true;
        let reason = if batch.timed_out { OracleError::Timeout } else { OracleError::BudgetExhausted };
        return Err(RunError::IncompleteValidation { ledger: ledger.clone(), reason });
    }
    Ok(())
}

fn score_key(p: f64) -> f64 {
    libm::fabs(p - 0.5)
}

/// Hybrid selection: `ceil(confident_fraction * budget)` highest-probability
/// pairs, the rest closest to 0.5. Already-labeled pairs are skipped; when
/// at most `budget` pairs remain, all of them are returned.
pub fn select_pairs(
    scored: &[(CandidatePair, f64)],
    budget: usize,
    confident_fraction: f64,
    is_labeled: impl Fn(&CandidatePair) -> bool,
) -> Vec<CandidatePair> {
    let eligible = eligible(scored, &is_labeled);
    if eligible.len() <= budget {
        return eligible.into_iter().map(|(p, _)| p.clone()).collect();
    }
    let n_conf = ceil_fraction(confident_fraction, budget).min(budget);
    let mut by_conf = eligible.clone();
    by_conf.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut chosen: BTreeSet<&CandidatePair> = BTreeSet::new();
    let mut out = Vec::with_capacity(budget);
    for (p, _) in by_conf.into_iter().take(n_conf) {
        chosen.insert(p);
        out.push(p.clone());
    }
    let mut by_doubt = eligible;
    by_doubt.sort_by(|a, b| score_key(a.1).total_cmp(&score_key(b.1)).then_with(|| a.0.cmp(b.0)));
    for (p, _) in by_doubt {
        if out.len() == budget {
            break;
        }
        if !chosen.contains(p) {
            out.push(p.clone());
        }
    }
    out
}

fn eligible<'a>(
    scored: &'a [(CandidatePair, f64)],
    is_labeled: &impl Fn(&CandidatePair) -> bool,
) -> Vec<(&'a CandidatePair, f64)> {
    let mut seen = BTreeSet::new();
    scored
        .iter()
        .filter(|(p, _)| !is_labeled(p) && seen.insert(p))
        .map(|(p, s)| (p, *s))
        .collect()
}

/// Query selection for any strategy; `seed` only matters for `Random`.
pub fn select_with_strategy(
    strategy: QueryStrategy,
    scored: &[(CandidatePair, f64)],
    budget: usize,
    confident_fraction: f64,
    is_labeled: impl Fn(&CandidatePair) -> bool,
    seed: u64,
) -> Vec<CandidatePair> {
    match strategy {
        QueryStrategy::Hybrid => select_pairs(scored, budget, confident_fraction, is_labeled),
        QueryStrategy::Uncertainty => select_pairs(scored, budget, 0.0, is_labeled),
        QueryStrategy::Random => {
            let mut pool = eligible(scored, &is_labeled);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pool.shuffle(&mut rng);
            pool.into_iter().take(budget).map(|(p, _)| p.clone()).collect()
        }
    }
}

/// True when each of the last `patience` F1 values improved on the best
/// value seen before it by less than `min_delta`.
pub fn early_stop(f1_history: &[f64], patience: usize, min_delta: f64) -> bool {
    if f1_history.len() <= patience {
        return false;
    }
    let start = f1_history.len() - patience;
    (start..f1_history.len()).all(|t| {
        let best_before = f1_history[..t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        f1_history[t] - best_before < min_delta
    })
}

/// Inputs of a training run.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub records_r: &'a RecordCollection,
    pub records_s: &'a RecordCollection,
    pub emb_r: &'a EmbeddingMatrix,
    pub emb_s: &'a EmbeddingMatrix,
    pub index: &'a AnnIndex,
    pub chunks: &'a ChunkSet,
    pub key_attrs: &'a [String],
}

/// One evaluation of the recall model inside a mini loop.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub chunk: usize,
    pub iteration: usize,
    pub f1: f64,
    pub threshold: f64,
    pub training_size: usize,
    /// Labels bought after this evaluation (0 when the loop stopped here).
    pub queried: usize,
    pub validation_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedArtifacts {
    pub recall_model: MlpModel,
    pub recall_threshold: ThresholdResult,
    pub precision_model: MlpModel,
    pub precision_threshold: ThresholdResult,
    pub ledger: BudgetLedger,
    pub iterations: Vec<IterationRecord>,
    pub labeled: LabeledSet,
    pub pool_sizes: Vec<usize>,
}

impl TrainedArtifacts {
    /// F1 values per chunk in evaluation order.
    pub fn f1_history(&self) -> Vec<Vec<f64>> {
        let n = self.pool_sizes.len();
        let mut out = vec![Vec::new(); n];
        for it in &self.iterations {
            out[it.chunk].push(it.f1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("seed set is single-class ({positives} positives, {negatives} negatives); raise the seed budget")]
    SingleClassSeed { positives: usize, negatives: usize, ledger: BudgetLedger },
    #[error("validation set could not be completed: {reason}")]
    IncompleteValidation { ledger: BudgetLedger, reason: OracleError },
    #[error("validation set has no positive pairs")]
    NoValidationPositives { ledger: BudgetLedger },
    #[error("oracle failed: {source}")]
    Oracle { source: OracleError, ledger: BudgetLedger },
}

impl RunError {
    /// Ledger at the time of failure, if any label was bought.
    pub fn ledger(&self) -> Option<&BudgetLedger> {
        match self {
            RunError::Invalid(_) => None,
            RunError::SingleClassSeed { ledger, .. }
            | RunError::IncompleteValidation { ledger, .. }
            | RunError::NoValidationPositives { ledger }
            | RunError::Oracle { ledger, .. } => Some(ledger),
        }
    }

    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self, RunError::IncompleteValidation { reason: OracleError::BudgetExhausted, .. })
    }
}

/// Training features kept in step with the growing labeled set.
struct FeatureCache {
    pairs: Vec<CandidatePair>,
    x: Vec<Vec<f64>>,
    y: Vec<u8>,
}

impl FeatureCache {
    fn new() -> Self {
        Self { pairs: Vec::new(), x: Vec::new(), y: Vec::new() }
    }

    fn sync<'e>(
        &mut self,
        entries: impl Iterator<Item = &'e LabeledPair>,
        featurize: impl Fn(&CandidatePair) -> Result<Vec<f64>>,
    ) -> Result<()> {
        for e in entries.skip(self.pairs.len()) {
            self.x.push(featurize(&e.pair)?);
            self.y.push(e.label);
            self.pairs.push(e.pair.clone());
        }
        Ok(())
    }
}

struct Trainer<'c> {
    config: &'c LoopConfig,
    calls: u64,
}

impl Trainer<'_> {
    fn next_config(&mut self) -> TrainConfig {
        self.calls += 1;
        TrainConfig { seed: derive_seed(self.config.seed, 0x6d6c_7000 + self.calls), ..self.config.train }
    }

    /// Trains on `train`, picks the F1-optimal threshold on `valid`.
    fn fit(
        &mut self,
        train: &FeatureCache,
        valid: &FeatureCache,
    ) -> Result<(MlpModel, ThresholdResult)> {
        let cfg = self.next_config();
        let model = mlp::train(&train.x, &train.y, &cfg)?;
        let probs = mlp::predict_batch(&model, &valid.x)?;
        let thr = mlp::optimal_threshold(&probs, &valid.y)?;
        Ok((model, thr))
    }
}

fn map_fit_err(e: Error, ledger: &BudgetLedger) -> RunError {
    match e {
        Error::NoPositives => RunError::NoValidationPositives { ledger: ledger.clone() },
        other => RunError::Invalid(other),
    }
}

/// Draws up to `budget` unlabeled pairs uniformly from the first pool,
/// topping up from later pools when it runs short.
fn draw_seed(pools: &[CandidatePool], budget: usize, labeled: &LabeledSet, seed: u64) -> Vec<CandidatePair> {
    let mut out = Vec::new();
    for (i, pool) in pools.iter().enumerate() {
        if out.len() >= budget {
            break;
        }
        let mut free: Vec<&CandidatePair> = pool.pairs.iter().filter(|p| !labeled.contains(p)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7365_6400 + i as u64));
        free.shuffle(&mut rng);
        out.extend(free.into_iter().take(budget - out.len()).cloned());
    }
    out
}

/// Runs the full training phase against `oracle`.
pub fn run<O: Oracle + ?Sized>(
    config: &LoopConfig,
    data: &RunData<'_>,
    oracle: &mut O,
) -> core::result::Result<TrainedArtifacts, RunError> {
    config.validate()?;
    let feat = LexicalFeaturizer::new(data.records_r, data.records_s, data.emb_r, data.emb_s, data.key_attrs)?;
    let pools = build_pools(data.chunks, data.index, data.emb_r, config.k, config.ef_search)?;
    let mut ledger = BudgetLedger::new(config.label_cap);
    let mut labeled = LabeledSet::new();

    label_validation(
        &pools,
        config.validation_fraction,
        config.validation_cap,
        oracle,
        derive_seed(config.seed, 1),
        &mut labeled,
        &mut ledger,
    )?;
    let validation_hash = labeled.validation_hash();
    let mut valid = FeatureCache::new();
    valid.sync(labeled.validation(), |p| feat.interaction(p))?;
    if !valid.y.contains(&1) {
        return Err(RunError::NoValidationPositives { ledger });
    }

    let mut seed_pairs = draw_seed(&pools, config.seed_budget, &labeled, derive_seed(config.seed, 2));
    let clipped = ledger.clip(&mut seed_pairs);
    let batch = oracle
        .label(&seed_pairs, Provenance::Seed)
        .map_err(|e| RunError::Oracle { source: e, ledger: ledger.clone() })?;
    ledger.seed += fuse(&mut labeled, &seed_pairs, &batch, Provenance::Seed)?;
    let mut stopped = clipped || batch.exhausted;
    ledger.truncated |= batch.exhausted;

    let positives = labeled.training().filter(|e| e.label == 1).count();
    let negatives = labeled.training().count() - positives;
    if positives == 0 || negatives == 0 {
        return Err(RunError::SingleClassSeed { positives, negatives, ledger });
    }

    let mut trainer = Trainer { config, calls: 0 };
    let mut train = FeatureCache::new();
    let mut iterations = Vec::new();

    for pool in &pools {
        if stopped {
            break;
        }
        let mut history = Vec::new();
        let mut pool_x: Option<Vec<Vec<f64>>> = None;
        for iteration in 1..=config.max_iterations {
            train.sync(labeled.training(), |p| feat.interaction(p))?;
            let (model, thr) = trainer.fit(&train, &valid).map_err(|e| map_fit_err(e, &ledger))?;
            history.push(thr.f1);
            oracle.progress(&Progress {
                chunk: pool.chunk,
                iteration,
                f1_history: &history,
                consumed: oracle.consumed(),
            });
            let mut record = IterationRecord {
                chunk: pool.chunk,
                iteration,
                f1: thr.f1,
                threshold: thr.threshold,
                training_size: train.x.len(),
                queried: 0,
                validation_hash,
            };
            if early_stop(&history, config.patience, config.min_delta) {
                iterations.push(record);
                break;
            }
            let xs = match &mut pool_x {
                Some(xs) => xs,
                None => pool_x.insert(
                    pool.pairs.iter().map(|p| feat.interaction(p)).collect::<Result<Vec<_>>>()?,
                ),
            };
            let open: Vec<usize> = (0..pool.pairs.len()).filter(|&i| !labeled.contains(&pool.pairs[i])).collect();
            if open.is_empty() {
                iterations.push(record);
                break;
            }
            let open_x: Vec<&[f64]> = open.iter().map(|&i| xs[i].as_slice()).collect();
            let probs = mlp::predict_batch(&model, &open_x)?;
            let scored: Vec<(CandidatePair, f64)> =
                open.iter().zip(probs).map(|(&i, p)| (pool.pairs[i].clone(), p)).collect();
            let mut query = select_with_strategy(
                config.strategy,
                &scored,
                config.batch_budget,
                config.confident_fraction,
                |p| labeled.contains(p),
                derive_seed(config.seed, 0x7172_0000 + ((pool.chunk as u64) << 16) + iteration as u64),
            );
            let clipped = ledger.clip(&mut query);
            if query.is_empty() {
                iterations.push(record);
                stopped = true;
                break;
            }
            let provenance = Provenance::Loop { chunk: pool.chunk, iteration };
            let batch = oracle
                .label(&query, provenance)
                .map_err(|e| RunError::Oracle { source: e, ledger: ledger.clone() })?;
            let got = fuse(&mut labeled, &query, &batch, provenance)?;
            ledger.loops.push(LoopEntry { chunk: pool.chunk, iteration, labels: got });
            record.queried = got;
            iterations.push(record);
            if batch.exhausted || clipped {
                ledger.truncated = true;
                stopped = true;
                break;
            }
        }
    }

    train.sync(labeled.training(), |p| feat.interaction(p))?;
    let (recall_model, recall_threshold) = trainer.fit(&train, &valid).map_err(|e| map_fit_err(e, &ledger))?;

    let mut train_lex = FeatureCache::new();
    train_lex.sync(labeled.training(), |p| feat.lexical(p))?;
    let mut valid_lex = FeatureCache::new();
    valid_lex.sync(labeled.validation(), |p| feat.lexical(p))?;
    let (precision_model, precision_threshold) =
        trainer.fit(&train_lex, &valid_lex).map_err(|e| map_fit_err(e, &ledger))?;

    Ok(TrainedArtifacts {
        recall_model,
        recall_threshold,
        precision_model,
        precision_threshold,
        ledger,
        iterations,
        labeled,
        pool_sizes: pools.iter().map(|p| p.pairs.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn pair(s: &str) -> CandidatePair {
        CandidatePair::new("r", s)
    }

    #[test]
    fn validation_plan_examples() {
        assert_eq!(plan_validation(&[100, 200, 700], 0.1, 1000), vec![10, 20, 70]);
        assert_eq!(plan_validation(&[100, 200, 700], 0.1, 50), vec![5, 10, 35]);
        assert_eq!(plan_validation(&[270, 270, 270], 0.1, 1000).iter().sum::<usize>(), 81);
        // largest remainder fills the cap exactly
        let p = plan_validation(&[33, 33, 34], 1.0, 10);
        assert_eq!(p.iter().sum::<usize>(), 10);
        assert!(p.iter().zip([33, 33, 34]).all(|(a, b)| *a <= b));
    }

    #[test]
    fn hybrid_selection_example() {
        let scored = vec![
            (pair("A"), 0.99),
            (pair("B"), 0.97),
            (pair("C"), 0.52),
            (pair("D"), 0.49),
            (pair("E"), 0.10),
        ];
        let q = select_pairs(&scored, 4, 0.5, |_| false);
        let got: BTreeSet<_> = q.iter().map(|p| p.s.as_str()).collect();
        assert_eq!(got, ["A", "B", "C", "D"].into_iter().collect());
    }

    #[test]
    fn selection_returns_remaining_when_short() {
        let scored = vec![(pair("A"), 0.3), (pair("B"), 0.6), (pair("C"), 0.9)];
        assert_eq!(select_pairs(&scored, 300, 0.5, |_| false).len(), 3);
        let q = select_pairs(&scored, 300, 0.5, |p| p.s == "B");
        assert_eq!(q, vec![pair("A"), pair("C")]);
    }

    #[test]
    fn strategies_differ() {
        let scored: Vec<_> = (0..50).map(|i| (pair(&format!("{i:02}")), i as f64 / 50.0)).collect();
        let unc = select_with_strategy(QueryStrategy::Uncertainty, &scored, 4, 0.5, |_| false, 0);
        assert_eq!(unc.iter().map(|p| p.s.as_str()).collect::<Vec<_>>(), ["25", "24", "26", "23"]);
        let rnd = select_with_strategy(QueryStrategy::Random, &scored, 10, 0.5, |_| false, 7);
        assert_eq!(rnd.len(), 10);
        assert_eq!(rnd, select_with_strategy(QueryStrategy::Random, &scored, 10, 0.5, |_| false, 7));
    }

    /// Set-based oracle for hybrid selection: confident = top-c of the
    /// ranked eligible list, then the confusion ranking minus the confident
    /// set, truncated to the budget.
    fn selection_oracle(scored: &[(CandidatePair, f64)], budget: usize, frac: f64, labeled: &BTreeSet<CandidatePair>) -> BTreeSet<CandidatePair> {
        let elig: Vec<_> = scored.iter().filter(|(p, _)| !labeled.contains(p)).cloned().collect();
        if elig.len() <= budget {
            return elig.into_iter().map(|(p, _)| p).collect();
        }
        let c = (frac * budget as f64 - 1e-9).ceil() as usize;
        let mut conf = elig.clone();
        conf.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top: BTreeSet<CandidatePair> = conf.into_iter().take(c).map(|(p, _)| p).collect();
        let mut unc = elig;
        unc.sort_by(|a, b| (a.1 - 0.5).abs().partial_cmp(&(b.1 - 0.5).abs()).unwrap().then(a.0.cmp(&b.0)));
        let rest = unc.into_iter().map(|(p, _)| p).filter(|p| !top.contains(p)).take(budget - top.len());
        top.iter().cloned().chain(rest).collect()
    }

    proptest! {
        #[test]
        fn hybrid_matches_sort_oracle(
            probs in proptest::collection::vec(0.001f64..0.999, 1..60),
            budget in 1usize..40,
            frac in 0.0f64..=1.0,
            labeled_mask in proptest::collection::vec(any::<bool>(), 60),
        ) {
            let scored: Vec<_> = probs.iter().enumerate().map(|(i, p)| (pair(&format!("{i:03}")), *p)).collect();
            let labeled: BTreeSet<CandidatePair> = scored.iter().zip(&labeled_mask).filter(|(_, m)| **m).map(|((p, _), _)| p.clone()).collect();
            let q = select_pairs(&scored, budget, frac, |p| labeled.contains(p));
            let got: BTreeSet<_> = q.iter().cloned().collect();
            prop_assert_eq!(got.len(), q.len());
            prop_assert!(q.len() <= budget);
            prop_assert!(q.iter().all(|p| !labeled.contains(p)));
            prop_assert_eq!(got, selection_oracle(&scored, budget, frac, &labeled));
        }
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop(&[0.50, 0.70, 0.71], 2, 0.05));
        assert!(early_stop(&[0.50, 0.70, 0.71, 0.72], 2, 0.05));
        assert!(!early_stop(&[0.50, 0.70, 0.76, 0.82], 2, 0.05));
        assert!(!early_stop(&[0.9], 1, 0.05));
        assert!(!early_stop(&[0.9], 3, 0.05));
        // best-so-far, not previous value
        assert!(early_stop(&[0.8, 0.5, 0.6], 2, 0.05));
    }

    #[test]
    fn labeled_set_rejects_relabel_and_tracks_exclusion() {
        let mut s = LabeledSet::new();
        s.insert(LabeledPair { pair: CandidatePair::new("r1", "s1"), label: 1, provenance: Provenance::Seed }).unwrap();
        s.insert(LabeledPair { pair: CandidatePair::new("r2", "s1"), label: 0, provenance: Provenance::Validation }).unwrap();
        assert!(s
            .insert(LabeledPair { pair: CandidatePair::new("r1", "s1"), label: 1, provenance: Provenance::Validation })
            .is_err());
        assert_eq!(s.training().count(), 1);
        assert_eq!(s.validation().count(), 1);
        let ex = s.exclusion_set();
        assert!(ex.contains("r1") && ex.contains("r2"));
        assert_eq!(ex.len(), 2);
        let _ = "x".to_string();
    }

    #[test]
    fn ledger_clip_respects_cap() {
        let mut l = BudgetLedger::new(Some(10));
        l.seed = 4;
        l.validation = 3;
        let mut req = vec![1, 2, 3, 4, 5];
        assert!(l.clip(&mut req));
        assert_eq!(req.len(), 3);
        assert!(l.truncated);
    }
}
