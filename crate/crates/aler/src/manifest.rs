//! `key = value` run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aler_core::{HnswParams, LoopConfig, QueryStrategy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{0}` is required")]
    Missing(&'static str),
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("field `{field}`: file {path} does not exist")]
    NoSuchFile { field: &'static str, path: PathBuf },
}

type Result<T> = std::result::Result<T, ManifestError>;

/// Everything a pipeline run needs. Relative paths are resolved against
/// the manifest's directory by [`RunManifest::load`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub records_r: PathBuf,
    pub records_s: PathBuf,
    pub id_column: String,
    pub delimiter: u8,
    pub embeddings_r: Option<PathBuf>,
    pub embeddings_s: Option<PathBuf>,
    pub encoder_url: Option<String>,
    pub encoder_batch: usize,
    pub truth: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub key_attrs: Vec<String>,
    pub seed: u64,
    pub sample_proportion: f64,
    pub n_chunks: Option<usize>,
    pub kmeans_max_iters: usize,
    pub hnsw: HnswParams,
    pub loop_config: LoopConfig,
    pub theta_r: Option<f64>,
    pub theta_p: Option<f64>,
    pub oracle_timeout_secs: Option<u64>,
    pub http_addr: String,
    pub http_token: Option<String>,
    pub static_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "records_r",
    "records_s",
    "id_column",
    "delimiter",
    "embeddings_r",
    "embeddings_s",
    "encoder_url",
    "encoder_batch",
    "truth",
    "output_dir",
    "key_attrs",
    "seed",
    "sample_proportion",
    "n_chunks",
    "kmeans_max_iters",
    "hnsw_m",
    "hnsw_ef_construction",
    "hnsw_ef_search",
    "k",
    "seed_budget",
    "batch_budget",
    "max_iterations",
    "patience",
    "min_delta",
    "validation_fraction",
    "validation_cap",
    "confident_fraction",
    "strategy",
    "label_cap",
    "epochs",
    "batch_size",
    "learning_rate",
    "dropout",
    "theta_r",
    "theta_p",
    "oracle_timeout_secs",
    "http_addr",
    "http_token",
    "static_dir",
];

/// Raw key/value view, used for overrides before typing.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ManifestError::Syntax { line: i + 1 })?;
        set_pair(&mut out, k.trim(), v.trim())?;
    }
    Ok(out)
}

fn set_pair(map: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<()> {
    if !KEYS.contains(&key) {
        return Err(ManifestError::UnknownField(key.to_string()));
    }
    map.insert(key.to_string(), value.to_string());
    Ok(())
}

/// Applies `key=value` overrides to a raw manifest.
pub fn apply_overrides(map: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ManifestError::Invalid { field: o.clone(), message: "override must be key=value".into() })?;
        set_pair(map, k.trim(), v.trim())?;
    }
    Ok(())
}

struct Fields<'a>(&'a BTreeMap<String, String>);

impl Fields<'_> {
    fn opt<T: FromStr>(&self, key: &'static str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key).filter(|v| !v.is_empty()) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e: T::Err| ManifestError::Invalid { field: key.into(), message: e.to_string() }),
        }
    }

    fn or<T: FromStr>(&self, key: &'static str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn req<T: FromStr>(&self, key: &'static str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?.ok_or(ManifestError::Missing(key))
    }
}

impl RunManifest {
    pub fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let f = Fields(map);
        let d = LoopConfig::default();
        let t = TrainConfig::default();
        let h = HnswParams::default();
        let delimiter: String = f.or("delimiter", ",".to_string())?;
        let delimiter = match delimiter.as_str() {
            "\\t" | "tab" => b'\t',
            s if s.len() == 1 => s.as_bytes()[0],
            _ => {
                return Err(ManifestError::Invalid {
                    field: "delimiter".into(),
                    message: "must be a single byte or `tab`".into(),
                })
            }
        };
        let key_attrs: String = f.req("key_attrs")?;
        let seed: u64 = f.req("seed")?;
        let m = Self {
            records_r: f.req("records_r")?,
            records_s: f.req("records_s")?,
            id_column: f.or("id_column", "id".to_string())?,
            delimiter,
            embeddings_r: f.opt("embeddings_r")?,
            embeddings_s: f.opt("embeddings_s")?,
            encoder_url: f.opt("encoder_url")?,
            encoder_batch: f.or("encoder_batch", 64)?,
            truth: f.opt("truth")?,
            output_dir: f.opt("output_dir")?,
            key_attrs: key_attrs.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            seed,
            sample_proportion: f.or("sample_proportion", 0.2)?,
            n_chunks: f.opt("n_chunks")?,
            kmeans_max_iters: f.or("kmeans_max_iters", 100)?,
            hnsw: HnswParams {
                m: f.or("hnsw_m", h.m)?,
                ef_construction: f.or("hnsw_ef_construction", h.ef_construction)?,
                ef_search: f.or("hnsw_ef_search", h.ef_search)?,
            },
            loop_config: LoopConfig {
                seed_budget: f.or("seed_budget", d.seed_budget)?,
                batch_budget: f.or("batch_budget", d.batch_budget)?,
                max_iterations: f.or("max_iterations", d.max_iterations)?,
                patience: f.or("patience", d.patience)?,
                min_delta: f.or("min_delta", d.min_delta)?,
                validation_fraction: f.or("validation_fraction", d.validation_fraction)?,
                validation_cap: f.or("validation_cap", d.validation_cap)?,
                k: f.or("k", d.k)?,
                ef_search: f.or("hnsw_ef_search", h.ef_search)?,
                confident_fraction: f.or("confident_fraction", d.confident_fraction)?,
                strategy: f.or::<QueryStrategy>("strategy", d.strategy)?,
                label_cap: f.opt("label_cap")?,
                train: TrainConfig {
                    batch_size: f.or("batch_size", t.batch_size)?,
                    max_epochs: f.or("epochs", t.max_epochs)?,
                    learning_rate: f.or("learning_rate", t.learning_rate)?,
                    dropout_rate: f.or("dropout", t.dropout_rate)?,
                    seed,
                },
                seed,
            },
            theta_r: f.opt("theta_r")?,
            theta_p: f.opt("theta_p")?,
            oracle_timeout_secs: f.opt("oracle_timeout_secs")?,
            http_addr: f.or("http_addr", "127.0.0.1:8080".to_string())?,
            http_token: f.opt("http_token")?,
            static_dir: f.opt("static_dir")?,
        };
        m.check_values()?;
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Reads a manifest file, applies overrides and resolves relative paths
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> std::result::Result<Self, crate::CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut map = parse_pairs(&text)?;
        apply_overrides(&mut map, overrides)?;
        let mut m = Self::from_pairs(&map)?;
        if let Some(base) = path.parent() {
            m.rebase(base);
        }
        Ok(m)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.records_r);
        fix(&mut self.records_s);
        for p in [&mut self.embeddings_r, &mut self.embeddings_s, &mut self.truth, &mut self.output_dir, &mut self.static_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    fn check_values(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(ManifestError::Invalid { field: field.into(), message: message.into() });
        if self.key_attrs.is_empty() {
            return bad("key_attrs", "needs at least one attribute");
        }
        if !(self.sample_proportion > 0.0 && self.sample_proportion <= 1.0) {
            return bad("sample_proportion", "must lie in (0, 1]");
        }
        if self.n_chunks == Some(0) {
            return bad("n_chunks", "must be positive");
        }
        if self.encoder_batch == 0 {
            return bad("encoder_batch", "must be positive");
        }
        for (field, v) in [("theta_r", self.theta_r), ("theta_p", self.theta_p)] {
            if v.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
                return bad(field, "must lie in [0, 1]");
            }
        }
        self.hnsw.validate().or_else(|e| bad("hnsw_m", &e.to_string()))?;
        self.loop_config.validate().or_else(|e| bad("loop", &e.to_string()))?;
        Ok(())
    }

    /// Checks that input files named by the manifest exist.
    pub fn check_files(&self, need_embeddings: bool, need_truth: bool) -> Result<()> {
        let exists = |field: &'static str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ManifestError::NoSuchFile { field, path: p.to_path_buf() })
            }
        };
        exists("records_r", &self.records_r)?;
        exists("records_s", &self.records_s)?;
        if need_embeddings && self.encoder_url.is_none() {
            let er = self.embeddings_r.as_deref().ok_or(ManifestError::Missing("embeddings_r"))?;
            let es = self.embeddings_s.as_deref().ok_or(ManifestError::Missing("embeddings_s"))?;
            exists("embeddings_r", er)?;
            exists("embeddings_s", es)?;
        }
        if need_truth {
            exists("truth", self.truth.as_deref().ok_or(ManifestError::Missing("truth"))?)?;
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` returns an equal manifest.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let path = |p: &Path| p.display().to_string();
        put("records_r", &path(&self.records_r));
        put("records_s", &path(&self.records_s));
        put("id_column", &self.id_column);
        let delim = if self.delimiter == b'\t' { "tab".to_string() } else { (self.delimiter as char).to_string() };
        put("delimiter", &delim);
        if let Some(p) = &self.embeddings_r {
            put("embeddings_r", &path(p));
        }
        if let Some(p) = &self.embeddings_s {
            put("embeddings_s", &path(p));
        }
        if let Some(u) = &self.encoder_url {
            put("encoder_url", u);
        }
        put("encoder_batch", &self.encoder_batch);
        if let Some(p) = &self.truth {
            put("truth", &path(p));
        }
        if let Some(p) = &self.output_dir {
            put("output_dir", &path(p));
        }
        put("key_attrs", &self.key_attrs.join(","));
        put("seed", &self.seed);
        put("sample_proportion", &self.sample_proportion);
        if let Some(n) = self.n_chunks {
            put("n_chunks", &n);
        }
        put("kmeans_max_iters", &self.kmeans_max_iters);
        put("hnsw_m", &self.hnsw.m);
        put("hnsw_ef_construction", &self.hnsw.ef_construction);
        put("hnsw_ef_search", &self.hnsw.ef_search);
        let c = &self.loop_config;
        put("k", &c.k);
        put("seed_budget", &c.seed_budget);
        put("batch_budget", &c.batch_budget);
        put("max_iterations", &c.max_iterations);
        put("patience", &c.patience);
        put("min_delta", &c.min_delta);
        put("validation_fraction", &c.validation_fraction);
        put("validation_cap", &c.validation_cap);
        put("confident_fraction", &c.confident_fraction);
        put("strategy", &c.strategy);
        if let Some(cap) = c.label_cap {
            put("label_cap", &cap);
        }
        put("epochs", &c.train.max_epochs);
        put("batch_size", &c.train.batch_size);
        put("learning_rate", &c.train.learning_rate);
        put("dropout", &c.train.dropout_rate);
        if let Some(t) = self.theta_r {
            put("theta_r", &t);
        }
        if let Some(t) = self.theta_p {
            put("theta_p", &t);
        }
        if let Some(t) = self.oracle_timeout_secs {
            put("oracle_timeout_secs", &t);
        }
        put("http_addr", &self.http_addr);
        if let Some(t) = &self.http_token {
            put("http_token", t);
        }
        if let Some(p) = &self.static_dir {
            put("static_dir", &path(p));
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
