//! The staged commands behind the `aler` binary.
//!
//! Artifacts live in one directory: `emb_r.bin`, `emb_s.bin`,
//! `index.hnsw`, `chunks.csv`, the trained models and their thresholds,
//! the budget ledger, the F1 history, the labeled pairs, `matches.csv` and
//! the metrics report. Each command also writes `<command>.provenance`
//! with the manifest hash, the seed and a digest of every file it wrote.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use aler_core::{
    GroundTruthOracle, LabeledPair, MatchSet, Oracle, RunData, RunError, TrainedArtifacts,
};
use anyhow::Context;
use sha2::{Digest, Sha256};

use crate::manifest::RunManifest;
use crate::pipeline::{self, Corpus};
use crate::service::{self, HttpOracle, TaskQueue};
use crate::{io, persist, CliError};

pub const ARTIFACT_DIR_ENV: &str = "ALER_ARTIFACT_DIR";

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    File,
    Http,
}

impl FromStr for OracleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "file" => Ok(Self::File),
            "http" => Ok(Self::Http),
            other => Err(format!("unknown oracle {other:?} (file|http)")),
        }
    }
}

/// Artifact file names inside the output directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `output_dir` from the manifest, else `$ALER_ARTIFACT_DIR`, else
    /// `./artifacts`.
    pub fn for_manifest(m: &RunManifest) -> Self {
        let dir = m
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(ARTIFACT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("artifacts"));
        Self::new(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Validation(format!("missing artifact {}; run `aler {producer}` first", p.display())))
        }
    }
}

pub const EMB_R: &str = "emb_r.bin";
pub const EMB_S: &str = "emb_s.bin";
pub const INDEX: &str = "index.hnsw";
pub const CHUNKS: &str = "chunks.csv";
pub const RECALL_MODEL: &str = "recall.model";
pub const PRECISION_MODEL: &str = "precision.model";
pub const THRESHOLDS: &str = "thresholds.txt";
pub const LEDGER: &str = "ledger.csv";
pub const LOOPS: &str = "ledger_loops.csv";
pub const HISTORY: &str = "f1_history.csv";
pub const LABELED: &str = "labeled.csv";
pub const RUN_SUMMARY: &str = "run.txt";
pub const MATCHES: &str = "matches.csv";
pub const RESOLVE_SUMMARY: &str = "resolve.txt";
pub const METRICS_TXT: &str = "metrics.txt";
pub const METRICS_JSON: &str = "metrics.json";

fn internal<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Internal(e.into())
}

fn header(command: &str, m: &RunManifest) -> String {
    format!("aler {command} config_hash={} seed={}", m.config_hash(), m.seed)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_provenance(art: &Artifacts, command: &str, m: &RunManifest, outputs: &[&str]) -> Result<()> {
    let mut s = format!("# {}\ncommand = {command}\nconfig_hash = {}\nseed = {}\n", header(command, m), m.config_hash(), m.seed);
    for name in outputs {
        let bytes = fs::read(art.path(name)).with_context(|| format!("reading back {name}"))?;
        let _ = writeln!(s, "sha256.{name} = {}", hex::encode(Sha256::digest(&bytes)));
    }
    write_text(&art.path(&format!("{command}.provenance")), &s)
}

fn load_corpus(m: &RunManifest, art: &Artifacts) -> Result<Corpus> {
    let records_r = io::load_records(&m.records_r, &m.id_column, m.delimiter)?;
    let records_s = io::load_records(&m.records_s, &m.id_column, m.delimiter)?;
    let emb_r = io::load_embeddings(&art.require(EMB_R, "ingest")?)?;
    let emb_s = io::load_embeddings(&art.require(EMB_S, "ingest")?)?;
    Ok(Corpus { records_r, records_s, emb_r, emb_s, key_attrs: m.key_attrs.clone() })
}

fn load_truth(m: &RunManifest) -> Result<MatchSet> {
    let path = m.truth.as_deref().ok_or_else(|| CliError::Validation("manifest: field `truth` is required".into()))?;
    Ok(io::load_truth(path, m.delimiter)?)
}

fn load_index(art: &Artifacts) -> Result<aler_core::AnnIndex> {
    persist::load_index(&art.require(INDEX, "index")?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", art.path(INDEX).display())))
}

/// Loads records and embeddings (from files or the encoder service),
/// checks them against each other and the ground truth, and stores the
/// normalized embeddings.
pub fn cmd_ingest(m: &RunManifest) -> Result<()> {
    m.check_files(true, false)?;
    let art = Artifacts::for_manifest(m);
    let records_r = io::load_records(&m.records_r, &m.id_column, m.delimiter)?;
    let records_s = io::load_records(&m.records_s, &m.id_column, m.delimiter)?;
    for (side, rc) in [("records_r", &records_r), ("records_s", &records_s)] {
        for a in &m.key_attrs {
            if rc.attribute_index(a).is_none() {
                return Err(CliError::Validation(format!("manifest: key attribute {a:?} not in {side} schema")));
            }
        }
    }
    let (emb_r, emb_s) = match &m.encoder_url {
        Some(url) => {
            let client = crate::encoder::EncoderClient::new(url.clone(), m.encoder_batch);
            (client.fetch(&records_r).map_err(internal)?, client.fetch(&records_s).map_err(internal)?)
        }
        None => (
            io::load_embeddings(m.embeddings_r.as_deref().expect("checked"))?,
            io::load_embeddings(m.embeddings_s.as_deref().expect("checked"))?,
        ),
    };
    if emb_r.dim() != emb_s.dim() {
        return Err(CliError::Validation(format!("embedding dims differ: R {} vs S {}", emb_r.dim(), emb_s.dim())));
    }
    emb_r.check_covers(&records_r).map_err(|e| CliError::Validation(format!("embeddings_r: {e}")))?;
    emb_s.check_covers(&records_s).map_err(|e| CliError::Validation(format!("embeddings_s: {e}")))?;
    if m.truth.is_some() {
        load_truth(m)?
            .validate(&records_r, &records_s)
            .map_err(|e| CliError::Validation(format!("truth: {e}")))?;
    }
    io::save_embeddings_binary(&art.path(EMB_R), &emb_r)?;
    io::save_embeddings_binary(&art.path(EMB_S), &emb_s)?;
    log::info!("ingested {} R and {} S records, dim {}", records_r.len(), records_s.len(), emb_r.dim());
    write_provenance(&art, "ingest", m, &[EMB_R, EMB_S])
}

pub fn cmd_index(m: &RunManifest) -> Result<()> {
    let art = Artifacts::for_manifest(m);
    let emb_s = io::load_embeddings(&art.require(EMB_S, "ingest")?)?;
    let index = pipeline::build_index(&emb_s, m.hnsw, m.seed).map_err(internal)?;
    persist::save_index(&art.path(INDEX), &index).map_err(internal)?;
    log::info!("indexed {} vectors", index.len());
    write_provenance(&art, "index", m, &[INDEX])
}

pub fn cmd_partition(m: &RunManifest) -> Result<()> {
    let art = Artifacts::for_manifest(m);
    let emb_r = io::load_embeddings(&art.require(EMB_R, "ingest")?)?;
    let (plan, chunks) = pipeline::partition(&emb_r, m.sample_proportion, m.n_chunks, m.seed, m.kmeans_max_iters)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    io::save_chunks(&art.path(CHUNKS), &chunks, &plan.sampled_ids, Some(&header("partition", m)))?;
    log::info!("partitioned {} sampled records into {} chunks", plan.sampled_ids.len(), chunks.len());
    write_provenance(&art, "partition", m, &[CHUNKS])
}

fn write_training_outputs(art: &Artifacts, m: &RunManifest, t: &TrainedArtifacts, n_chunks: usize) -> Result<()> {
    let h = header("train", m);
    persist::save_model(&art.path(RECALL_MODEL), &t.recall_model).map_err(internal)?;
    persist::save_model(&art.path(PRECISION_MODEL), &t.precision_model).map_err(internal)?;
    write_text(
        &art.path(THRESHOLDS),
        &format!(
            "# {h}\ntheta_r = {}\nf1_r = {}\ntheta_p = {}\nf1_p = {}\n",
            t.recall_threshold.threshold, t.recall_threshold.f1, t.precision_threshold.threshold, t.precision_threshold.f1
        ),
    )?;
    let mut hist = format!("# {h}\nchunk,iteration,f1,threshold,training_size,queried,validation_hash\n");
    for it in &t.iterations {
        let _ = writeln!(
            hist,
            "{},{},{},{},{},{},{:016x}",
            it.chunk, it.iteration, it.f1, it.threshold, it.training_size, it.queried, it.validation_hash
        );
    }
    write_text(&art.path(HISTORY), &hist)?;
    write_labeled(&art.path(LABELED), &h, t.labeled.entries())?;
    write_ledger(art, &h, &t.ledger, n_chunks)?;
    let summary = format!(
        "# {h}\nstrategy = {}\ntruncated = {}\nlabels = {}\npool_sizes = {}\n",
        m.loop_config.strategy,
        t.ledger.truncated,
        t.labeled.len(),
        t.pool_sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
    write_text(&art.path(RUN_SUMMARY), &summary)?;
    write_provenance(
        art,
        "train",
        m,
        &[RECALL_MODEL, PRECISION_MODEL, THRESHOLDS, HISTORY, LABELED, LEDGER, LOOPS, RUN_SUMMARY],
    )
}

fn write_labeled(path: &Path, h: &str, entries: &[LabeledPair]) -> Result<()> {
    let mut s = format!("# {h}\nr_id,s_id,label,provenance\n");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for e in entries {
        w.write_record([e.pair.r.as_str(), e.pair.s.as_str(), &e.label.to_string(), &e.provenance.to_string()])
            .map_err(internal)?;
    }
    s.push_str(std::str::from_utf8(&w.into_inner().map_err(|e| internal(e.into_error()))?).map_err(internal)?);
    write_text(path, &s)
}

/// Table-style ledger (`N,B_seed,V,Loop,Total`) plus one row per loop
/// iteration in a second file.
fn write_ledger(art: &Artifacts, h: &str, l: &aler_core::BudgetLedger, n_chunks: usize) -> Result<()> {
    write_text(
        &art.path(LEDGER),
        &format!("# {h}\nN,B_seed,V,Loop,Total\n{n_chunks},{},{},{},{}\n", l.seed, l.validation, l.loop_total(), l.total()),
    )?;
    let mut s = format!("# {h}\nchunk,iteration,labels\n");
    for e in &l.loops {
        let _ = writeln!(s, "{},{},{}", e.chunk, e.iteration, e.labels);
    }
    write_text(&art.path(LOOPS), &s)
}

/// Reads the labeled pairs written by `train`.
pub fn read_labeled(path: &Path) -> Result<Vec<LabeledPair>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(internal)?;
        let bad = || CliError::Validation(format!("{}: malformed row {:?}", path.display(), rec));
        let label = rec.get(2).and_then(|l| l.parse().ok()).ok_or_else(bad)?;
        let provenance = rec.get(3).and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        out.push(LabeledPair { pair: aler_core::CandidatePair::new(&rec[0], &rec[1]), label, provenance });
    }
    Ok(out)
}

/// Parses a `key = value` text file, ignoring `#` lines.
pub fn read_kv(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

pub struct TrainOptions {
    pub oracle: OracleKind,
}

pub fn cmd_train(m: &RunManifest, opts: &TrainOptions) -> Result<TrainedArtifacts> {
    let art = Artifacts::for_manifest(m);
    let corpus = load_corpus(m, &art)?;
    let index = load_index(&art)?;
    let chunks = io::load_chunks(&art.require(CHUNKS, "partition")?, &corpus.emb_r)?;
    let cfg = m.loop_config.clone();
    let data = RunData {
        records_r: &corpus.records_r,
        records_s: &corpus.records_s,
        emb_r: &corpus.emb_r,
        emb_s: &corpus.emb_s,
        index: &index,
        chunks: &chunks,
        key_attrs: &corpus.key_attrs,
    };
    let outcome = match opts.oracle {
        OracleKind::File => {
            let truth = load_truth(m)?;
            let mut oracle = GroundTruthOracle::new(&truth, cfg.label_cap);
            let r = aler_core::run(&cfg, &data, &mut oracle);
            log::info!("ground-truth oracle answered {} pairs", oracle.consumed());
            r
        }
        OracleKind::Http => {
            let queue = Arc::new(TaskQueue::new(cfg.label_cap));
            let app = service::router(queue.clone(), m.http_token.clone(), m.static_dir.clone());
            let server = service::spawn_server(&m.http_addr, app).map_err(internal)?;
            log::info!("labeling service on http://{}", server.addr);
            let mut oracle = HttpOracle {
                queue,
                records_r: Arc::new(corpus.records_r.clone()),
                records_s: Arc::new(corpus.records_s.clone()),
                timeout: m.oracle_timeout_secs.map(Duration::from_secs),
            };
            let r = aler_core::run(&cfg, &data, &mut oracle);
            server.shutdown();
            r
        }
    };
    let mut trained = match outcome {
        Ok(t) => t,
        Err(e) => {
            if let Some(l) = e.ledger() {
                write_ledger(&art, &header("train", m), l, chunks.len())?;
            }
            return Err(classify(e));
        }
    };
    pipeline::quantize_artifacts(&mut trained, &corpus.featurizer().map_err(internal)?).map_err(internal)?;
    if trained.ledger.truncated {
        log::warn!("label budget ran out; models were trained on {} labels", trained.ledger.total());
    }
    write_training_outputs(&art, m, &trained, chunks.len())?;
    Ok(trained)
}

fn classify(e: RunError) -> CliError {
    let msg = e.to_string();
    match e {
        e if e.is_budget_exhausted() => CliError::BudgetExhausted(msg),
        RunError::Invalid(_) | RunError::SingleClassSeed { .. } | RunError::NoValidationPositives { .. } => {
            CliError::Validation(msg)
        }
        _ => CliError::Internal(anyhow::anyhow!(msg)),
    }
}

pub struct Thresholds {
    pub theta_r: f64,
    pub theta_p: f64,
}

fn thresholds(m: &RunManifest, art: &Artifacts) -> Result<Thresholds> {
    let kv = read_kv(&art.require(THRESHOLDS, "train")?)?;
    let get = |k: &str| -> Result<f64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Validation(format!("{}: missing {k}", art.path(THRESHOLDS).display())))
    };
    Ok(Thresholds { theta_r: m.theta_r.map_or_else(|| get("theta_r"), Ok)?, theta_p: m.theta_p.map_or_else(|| get("theta_p"), Ok)? })
}

fn exclusion(art: &Artifacts) -> Result<BTreeSet<String>> {
    Ok(read_labeled(&art.require(LABELED, "train")?)?.into_iter().map(|e| e.pair.r).collect())
}

fn held_out(m: &RunManifest, truth: Option<&MatchSet>) -> Result<(Artifacts, pipeline::Outcome)> {
    let art = Artifacts::for_manifest(m);
    let corpus = load_corpus(m, &art)?;
    let index = load_index(&art)?;
    let load_model = |name: &str| {
        persist::load_model(&art.require(name, "train")?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", art.path(name).display())))
    };
    let mr = load_model(RECALL_MODEL)?;
    let mp = load_model(PRECISION_MODEL)?;
    let t = thresholds(m, &art)?;
    let ex = exclusion(&art)?;
    let out = pipeline::resolve_held_out(
        &corpus,
        &index,
        m.loop_config.k,
        m.loop_config.ef_search,
        &ex,
        (&mr, t.theta_r, &mp, t.theta_p),
        truth,
    )
    .map_err(|e| CliError::Validation(format!("resolution failed (corrupt artifacts?): {e}")))?;
    Ok((art, out))
}

pub fn cmd_resolve(m: &RunManifest) -> Result<aler_core::Resolution> {
    let (art, out) = held_out(m, None)?;
    let h = header("resolve", m);
    let mut s = format!("# {h}\nr_id,s_id,stage1_prob,stage2_prob\n");
    for x in &out.resolution.matches {
        let _ = writeln!(s, "{},{},{},{}", x.pair.r, x.pair.s, x.stage1, x.stage2);
    }
    write_text(&art.path(MATCHES), &s)?;
    let r = &out.resolution;
    write_text(
        &art.path(RESOLVE_SUMMARY),
        &format!(
            "# {h}\ncandidates = {}\nstage1_survivors = {}\nlexical_computations = {}\nmatches = {}\n",
            r.candidates,
            r.stage1_survivors,
            r.lexical_computations,
            r.matches.len()
        ),
    )?;
    write_provenance(&art, "resolve", m, &[MATCHES, RESOLVE_SUMMARY])?;
    Ok(out.resolution)
}

/// Scores `matches.csv` against the ground truth; blocking recall is
/// recomputed from the candidate set.
pub fn cmd_eval(m: &RunManifest) -> Result<aler_core::Metrics> {
    let truth = load_truth(m)?;
    let art = Artifacts::for_manifest(m);
    let matches_path = art.require(MATCHES, "resolve")?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&matches_path).map_err(internal)?;
    let mut predicted = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(internal)?;
        predicted.push(aler_core::CandidatePair::new(&rec[0], &rec[1]));
    }
    let corpus = load_corpus(m, &art)?;
    let index = load_index(&art)?;
    let ex = exclusion(&art)?;
    let candidates =
        aler_core::generate_candidates(&index, &corpus.emb_r, m.loop_config.k, m.loop_config.ef_search, &ex)
            .map_err(internal)?;
    let metrics = aler_core::evaluate(&predicted, &truth, &candidates, &ex)
        .map_err(|e| CliError::Validation(format!("evaluation: {e}")))?;
    let h = header("eval", m);
    write_text(
        &art.path(METRICS_TXT),
        &format!(
            "# {h}\nprecision = {}\nrecall = {}\nf1 = {}\nblocking_recall = {}\ntp = {}\nfp = {}\nfn = {}\ncandidates = {}\n",
            metrics.precision,
            metrics.recall,
            metrics.f1,
            metrics.blocking_recall,
            metrics.tp,
            metrics.fp,
            metrics.fn_,
            metrics.candidates
        ),
    )?;
    let json = serde_json::json!({
        "config_hash": m.config_hash(),
        "seed": m.seed,
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "blocking_recall": metrics.blocking_recall,
        "tp": metrics.tp,
        "fp": metrics.fp,
        "fn": metrics.fn_,
        "candidates": metrics.candidates,
    });
    write_text(&art.path(METRICS_JSON), &(serde_json::to_string_pretty(&json).map_err(internal)? + "\n"))?;
    write_provenance(&art, "eval", m, &[METRICS_TXT, METRICS_JSON])?;
    Ok(metrics)
}

pub struct SynthOptions {
    pub n_records: usize,
    pub spec: aler_core::synth::PerturbationSpec,
    pub dim: usize,
    pub text_embeddings: bool,
}

/// Writes a synthetic corpus in the ingest formats plus a manifest that
/// points at it.
pub fn cmd_synth(out: &Path, o: &SynthOptions) -> Result<PathBuf> {
    let enc = aler_core::synth::SurrogateEncoder::new(o.dim, o.spec.seed).map_err(|e| CliError::Validation(e.to_string()))?;
    let c = aler_core::synth::generate_with_encoder(o.n_records, &o.spec, enc)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    io::save_records(&out.join("records_r.csv"), &c.records_r, "id")?;
    io::save_records(&out.join("records_s.csv"), &c.records_s, "id")?;
    io::save_truth(&out.join("truth.csv"), &c.truth)?;
    let (er, es) = if o.text_embeddings { ("emb_r.txt", "emb_s.txt") } else { ("emb_r.emb", "emb_s.emb") };
    for (name, m) in [(er, &c.emb_r), (es, &c.emb_s)] {
        if o.text_embeddings {
            io::save_embeddings_text(&out.join(name), m)?;
        } else {
            io::save_embeddings_binary(&out.join(name), m)?;
        }
    }
    let manifest = format!(
        "records_r = records_r.csv\nrecords_s = records_s.csv\nembeddings_r = {er}\nembeddings_s = {es}\ntruth = truth.csv\n\
         output_dir = artifacts\nkey_attrs = {}\nseed = {}\n",
        c.key_attrs.join(","),
        o.spec.seed
    );
    let path = out.join("aler.manifest");
    write_text(&path, &manifest)?;
    Ok(path)
}
