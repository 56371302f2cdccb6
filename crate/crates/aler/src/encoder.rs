//! Client for an external text encoder: POST `{"texts": [..]}`, receive
//! `{"vectors": [[..]]}`.

use std::thread::sleep;
use std::time::Duration;

use aler_core::{EmbeddingMatrix, RecordCollection};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder request failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("encoder returned {got} vectors for {sent} texts")]
    Count { sent: usize, got: usize },
    #[error("encoder returned dim {first} and later dim {other}")]
    DimChanged { first: usize, other: usize },
    #[error("no records to encode")]
    Empty,
    #[error(transparent)]
    Core(#[from] aler_core::Error),
}

#[derive(Debug, Clone)]
pub struct EncoderClient {
    pub url: String,
    pub batch_size: usize,
    pub retries: usize,
    pub backoff: Duration,
}

#[derive(Serialize)]
struct Request<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct Response {
    vectors: Vec<Vec<f32>>,
}

impl EncoderClient {
    pub fn new(url: impl Into<String>, batch_size: usize) -> Self {
        Self { url: url.into(), batch_size: batch_size.max(1), retries: 3, backoff: Duration::from_millis(200) }
    }

    fn post(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncoderError> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                sleep(self.backoff * attempt as u32);
            }
            let reply = ureq::post(&self.url)
                .send_json(Request { texts })
                .and_then(|mut r| r.body_mut().read_json::<Response>());
            match reply {
                Ok(r) => return Ok(r.vectors),
                Err(e) => {
                    log::warn!("encoder attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(EncoderError::Transport { attempts: self.retries + 1, message: last })
    }

    /// One vector per record, in record order.
    pub fn fetch(&self, records: &RecordCollection) -> Result<EmbeddingMatrix, EncoderError> {
        if records.is_empty() {
            return Err(EncoderError::Empty);
        }
        let mut matrix: Option<EmbeddingMatrix> = None;
        for batch in records.records().chunks(self.batch_size) {
            let texts: Vec<String> = batch.iter().map(|r| records.record_text(r)).collect();
            for (r, t) in batch.iter().zip(&texts) {
                if r.values.iter().all(|v| v.trim().is_empty()) {
                    log::warn!("record {:?} has no text: {t:?}", r.id);
                }
            }
            let vectors = self.post(&texts)?;
            if vectors.len() != texts.len() {
                return Err(EncoderError::Count { sent: texts.len(), got: vectors.len() });
            }
            for (r, v) in batch.iter().zip(vectors) {
                let m = match &mut matrix {
                    Some(m) => m,
                    None => matrix.insert(EmbeddingMatrix::new(v.len())?),
                };
                if v.len() != m.dim() {
                    return Err(EncoderError::DimChanged { first: m.dim(), other: v.len() });
                }
                m.push(r.id.clone(), &v)?;
            }
        }
        Ok(matrix.expect("records are non-empty"))
    }
}
